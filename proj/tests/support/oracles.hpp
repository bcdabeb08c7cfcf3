#pragma once

// Slow, obviously-correct reference implementations used only by tests.
// Everything accumulates in double and uses plain nested loops.

#include <map>
#include <set>
#include <vector>

#include "psla/attention.hpp"
#include "psla/fusion.hpp"
#include "psla/tensor.hpp"

namespace oracle {

using psla::Offset;
using psla::Tensor;

// Zero-padded "same" convolution, weights (out, in, k, k).
Tensor conv2d(const Tensor& x, const psla::ConvParams& p);

Tensor relu(const Tensor& x);

// Offsets straight from the set definition: {(0,0)} united with, for each
// stride s, every (a, b) in {-s,0,s}^2 other than (0,0).
std::set<Offset> progressive_set(int d);
std::set<Offset> dense_set(int d);

enum class Norm { Softmax, ClampedSum };

struct CellWeights {
  std::map<Offset, double> by_offset;  // only positions inside the map
};

struct AlignResult {
  Tensor aligned;
  std::vector<CellWeights> cells;  // row-major over (y, x)
};

// For every target cell, gathers the set of in-bounds source positions
// reached by `offsets`, scores each with the embedded dot product, normalises
// and averages the raw source. MatchTrans-style ClampedSum falls back to the
// center when every clamped score is zero.
AlignResult brute_force_align(const Tensor& target, const Tensor& source, const psla::EmbeddingPair& emb,
                              const std::set<Offset>& offsets, Norm norm = Norm::Softmax, double temperature = 1.0);

// Global softmax over every source position.
Tensor brute_force_nonlocal(const Tensor& target, const Tensor& source, const psla::EmbeddingPair& emb);

// Per-location two-way softmax fuse written out elementwise.
Tensor two_stream_fuse(const Tensor& a, const Tensor& b, const psla::TwoStreamFusionNet& net);

}  // namespace oracle
