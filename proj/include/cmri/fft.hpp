#pragma once

#include "cmri/grid.hpp"

namespace cmri {

// Centred, orthonormal 2-D transforms: the k-space centre sits at index
// (rows/2, cols/2) and both directions preserve the L2 norm.
ComplexField fft2c(const ComplexField& image);
ComplexField ift2c(const ComplexField& kspace);

}  // namespace cmri
