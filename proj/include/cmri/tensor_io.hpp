#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "cmri/archive.hpp"
#include "cmri/grid.hpp"
#include "cmri/labels.hpp"

namespace cmri {

// Stack records into one float tensor of shape [N, record shape...].
torch::Tensor stack_records(const RecordSet& set);
torch::Tensor stack_records(const RecordSet& set, std::span<const std::size_t> indices);

std::vector<float> to_vector(const torch::Tensor& t);

// [2, H, W] tensor <-> complex field (channel 0 real, channel 1 imaginary).
ComplexField to_field(const torch::Tensor& t);
torch::Tensor from_field(const ComplexField& f);

torch::Tensor sequence_ids(const std::vector<ConditionLabel>& labels);
torch::Tensor abnormality_ids(const std::vector<ConditionLabel>& labels);

at::Generator make_generator(std::uint64_t seed, std::string_view stream);

// Every parameter and buffer of a module as "<prefix><name>" arrays.
void store_module(Container& c, const std::string& prefix, const torch::nn::Module& m);
// Throws ValidationError when an array is missing or has the wrong shape.
void restore_module(const Container& c, const std::string& prefix, torch::nn::Module& m);

// dst <- src, parameter by parameter (identical architectures).
void copy_parameters(torch::nn::Module& dst, const torch::nn::Module& src);

}  // namespace cmri
