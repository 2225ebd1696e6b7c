#pragma once

#include <any>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "cpra/tensor.hpp"

namespace cpra {

// Binary keep-mask over attention rows: shape N x heads x rows x cols, one byte
// per entry.
struct RowMask {
  Shape shape;
  std::vector<std::uint8_t> keep;

  std::uint8_t at(int n, int head, int row, int col) const {
    return keep[((static_cast<std::size_t>(n) * shape.c + head) * shape.h + row) * shape.w + col];
  }
  int row_count(int n, int head, int row) const {
    int k = 0;
    for (int c = 0; c < shape.w; ++c) k += at(n, head, row, c);
    return k;
  }
  friend bool operator==(const RowMask&, const RowMask&) = default;
};

struct SparsityTrace {
  double p = 0.0;              // EPGO fraction
  int k_per_head = 0;          // entries kept per attention row
  int head_dim = 0;            // row length C_h
  double retained_fraction = 0.0;
};

struct LayerTrace {
  std::string layer;
  int item = 0;  // batch index
  int heads = 1;
  SparsityTrace trace;
};

struct ImagEnergy {
  std::string layer;
  double discarded_imag = 0.0;
  double kept_real = 0.0;
};

enum class MaskMode { Compute, Record, Replay };

// Top-k masks keyed by layer name. Record stores the masks a forward pass
// chose; Replay forces later passes to reuse them, which keeps finite
// differences on one smooth piece of the function.
struct MaskStore {
  MaskMode mode = MaskMode::Compute;
  std::map<std::string, RowMask> masks;
};

// Stage outputs of a previous forward pass. Stages before `first_dirty` are
// taken from `outputs` instead of being recomputed; used by finite-difference
// checks where a perturbation only touches later stages.
struct StageCache {
  bool record = false;
  std::size_t first_dirty = std::numeric_limits<std::size_t>::max();
  std::vector<std::any> outputs;  // Tensor<T> per stage
};

struct ForwardContext {
  MaskStore* masks = nullptr;
  StageCache* stages = nullptr;
  std::vector<LayerTrace>* traces = nullptr;
  std::vector<ImagEnergy>* imag_energy = nullptr;  // debug statistics of the frequency stage
  bool epgo_straight_through = false;
};

}  // namespace cpra
