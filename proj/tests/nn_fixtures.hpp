#pragma once

#include <string>

#include <torch/torch.h>

#include "cmri/archive.hpp"
#include "cmri/tensor_io.hpp"

namespace cmri::testing {

// n records of the given shape, filled from t ([n, shape...]).
inline RecordSet records_from(const torch::Tensor& t, const std::vector<ConditionLabel>& labels,
                              const std::string& id_prefix = "v") {
  RecordSet s;
  s.shape.assign(t.sizes().begin() + 1, t.sizes().end());
  const torch::Tensor c = t.to(torch::kFloat).contiguous();
  for (std::int64_t i = 0; i < t.size(0); ++i) {
    const std::vector<float> v = to_vector(c[i]);
    RecordMeta m;
    m.volume_id = id_prefix + std::to_string(i);
    m.condition = labels[static_cast<std::size_t>(i) % labels.size()];
    m.volume_class = m.condition.abnormality == Abnormality::Abnormal ? VolumeClass::Abnormal
                     : m.condition.abnormality == Abnormality::Normal ? VolumeClass::Normal
                                                                      : VolumeClass::Unlabeled;
    s.append(v, m);
  }
  return s;
}

inline double max_abs(const torch::Tensor& t) { return t.abs().max().item<double>(); }

}  // namespace cmri::testing
