#include "cmri/tensor_io.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include "cmri/error.hpp"
#include "cmri/rng.hpp"

namespace cmri {

torch::Tensor stack_records(const RecordSet& set) {
  std::vector<std::int64_t> shape{static_cast<std::int64_t>(set.size())};
  shape.insert(shape.end(), set.shape.begin(), set.shape.end());
  return torch::from_blob(const_cast<float*>(set.values.data()), shape, torch::kFloat).clone();
}

torch::Tensor stack_records(const RecordSet& set, std::span<const std::size_t> indices) {
  std::vector<std::int64_t> shape{static_cast<std::int64_t>(indices.size())};
  shape.insert(shape.end(), set.shape.begin(), set.shape.end());
  torch::Tensor out = torch::empty(shape, torch::kFloat);
  const std::size_t n = set.record_size();
  float* dst = out.data_ptr<float>();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto rec = set.record(indices[i]);
    std::copy(rec.begin(), rec.end(), dst + i * n);
  }
  return out;
}

std::vector<float> to_vector(const torch::Tensor& t) {
  const torch::Tensor c = t.detach().to(torch::kFloat).contiguous();
  return std::vector<float>(c.data_ptr<float>(), c.data_ptr<float>() + c.numel());
}

ComplexField to_field(const torch::Tensor& t) {
  if (t.dim() != 3 || t.size(0) != 2) throw std::invalid_argument("to_field: expected [2, H, W]");
  const torch::Tensor c = t.detach().to(torch::kDouble).contiguous();
  const auto rows = static_cast<std::size_t>(c.size(1));
  const auto cols = static_cast<std::size_t>(c.size(2));
  const double* p = c.data_ptr<double>();
  ComplexField f(rows, cols);
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = Complex(p[i], p[f.size() + i]);
  return f;
}

torch::Tensor from_field(const ComplexField& f) {
  torch::Tensor t = torch::empty({2, static_cast<std::int64_t>(f.rows()), static_cast<std::int64_t>(f.cols())},
                                 torch::kFloat);
  float* p = t.data_ptr<float>();
  for (std::size_t i = 0; i < f.size(); ++i) {
    p[i] = static_cast<float>(f[i].real());
    p[f.size() + i] = static_cast<float>(f[i].imag());
  }
  return t;
}

torch::Tensor sequence_ids(const std::vector<ConditionLabel>& labels) {
  torch::Tensor t = torch::empty({static_cast<std::int64_t>(labels.size())}, torch::kLong);
  auto a = t.accessor<std::int64_t, 1>();
  for (std::size_t i = 0; i < labels.size(); ++i) a[static_cast<std::int64_t>(i)] = static_cast<std::int64_t>(labels[i].sequence);
  return t;
}

torch::Tensor abnormality_ids(const std::vector<ConditionLabel>& labels) {
  torch::Tensor t = torch::empty({static_cast<std::int64_t>(labels.size())}, torch::kLong);
  auto a = t.accessor<std::int64_t, 1>();
  for (std::size_t i = 0; i < labels.size(); ++i) a[static_cast<std::int64_t>(i)] = static_cast<std::int64_t>(labels[i].abnormality);
  return t;
}

at::Generator make_generator(std::uint64_t seed, std::string_view stream) {
  return at::make_generator<at::CPUGeneratorImpl>(substream_seed(seed, stream));
}

void store_module(Container& c, const std::string& prefix, const torch::nn::Module& m) {
  auto add = [&](const std::string& name, const torch::Tensor& t) {
    NamedArray a;
    a.name = prefix + name;
    a.shape.assign(t.sizes().begin(), t.sizes().end());
    a.values = to_vector(t);
    c.arrays.push_back(std::move(a));
  };
  for (const auto& p : m.named_parameters()) add(p.key(), p.value());
  for (const auto& b : m.named_buffers()) add(b.key(), b.value());
}

void restore_module(const Container& c, const std::string& prefix, torch::nn::Module& m) {
  torch::NoGradGuard guard;
  auto load = [&](const std::string& name, torch::Tensor& t) {
    if (!c.has(prefix + name)) throw ValidationError("checkpoint lacks array " + prefix + name);
    const NamedArray& a = c.array(prefix + name);
    if (!std::equal(a.shape.begin(), a.shape.end(), t.sizes().begin(), t.sizes().end())) {
      throw ValidationError("checkpoint array " + prefix + name + " has the wrong shape");
    }
    t.copy_(torch::from_blob(const_cast<float*>(a.values.data()), t.sizes(), torch::kFloat));
  };
  for (auto& p : m.named_parameters()) load(p.key(), p.value());
  for (auto& b : m.named_buffers()) load(b.key(), b.value());
}

void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src) {
  torch::NoGradGuard guard;
  auto d = dst.named_parameters();
  const auto s = src.named_parameters();
  if (d.size() != s.size()) throw std::invalid_argument("copy_parameters: architectures differ");
  for (const auto& p : s) {
    auto* target = d.find(p.key());
    if (target == nullptr || !target->sizes().equals(p.value().sizes())) {
      throw std::invalid_argument("copy_parameters: mismatch at " + p.key());
    }
    target->copy_(p.value());
  }
}

}  // namespace cmri
