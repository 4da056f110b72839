// Copyright 2026 The omniscan Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

// Omni-directional attention (OA): direction serialization of a (B, C, F, T)
// feature grid into 1-D sequences, a shared Mamba run over every direction,
// gating, and the pooled channel-axis branch.

#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "omniscan/autodiff.hpp"
#include "omniscan/errors.hpp"
#include "omniscan/params.hpp"
#include "omniscan/ssm.hpp"
#include "omniscan/tensor.hpp"

namespace omniscan {

enum class Axis : std::uint8_t { kT, kF, kC };
enum class Orientation : std::uint8_t { kForward, kBackward };
// Order in which the non-scanned spatial axis is enumerated.
enum class Traversal : std::uint8_t { kPrimary, kTransposed };

struct ScanDirection {
  Axis axis = Axis::kT;
  Orientation orientation = Orientation::kForward;
  Traversal traversal = Traversal::kPrimary;  // always primary for kC

  friend bool operator==(const ScanDirection&, const ScanDirection&) = default;

  // "T+", "F-", "T+~" (transposed), "C-".
  std::string name() const {
    std::string s = axis == Axis::kT ? "T" : axis == Axis::kF ? "F" : "C";
    s += orientation == Orientation::kForward ? "+" : "-";
    if (traversal == Traversal::kTransposed) s += "~";
    return s;
  }
};

struct DirectionSet {
  std::vector<ScanDirection> tf_directions;
  bool channel_branch = false;

  static const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"4d_tf", "6d_tfc", "8d_tf",
                                                   "10d_tfc"};
    return names;
  }

  static DirectionSet preset(const std::string& name) {
    DirectionSet s;
    const bool eight = name == "8d_tf" || name == "10d_tfc";
    if (!eight && name != "4d_tf" && name != "6d_tfc")
      throw ContractError("unknown direction set '" + name +
                          "' (expected 4d_tf, 6d_tfc, 8d_tf or 10d_tfc)");
    for (Traversal tr : {Traversal::kPrimary, Traversal::kTransposed}) {
      if (tr == Traversal::kTransposed && !eight) break;
      for (Axis ax : {Axis::kT, Axis::kF})
        for (Orientation o : {Orientation::kForward, Orientation::kBackward})
          s.tf_directions.push_back({ax, o, tr});
    }
    s.channel_branch = name == "6d_tfc" || name == "10d_tfc";
    return s;
  }

  std::string name() const {
    return std::to_string(size()) + (channel_branch ? "d_tfc" : "d_tf");
  }

  std::size_t size() const {
    return tf_directions.size() + (channel_branch ? 2 : 0);
  }

  void validate() const {
    if (tf_directions.size() != 4 && tf_directions.size() != 8)
      throw ContractError("direction set needs 4 or 8 T/F directions, got " +
                          std::to_string(tf_directions.size()));
    for (std::size_t i = 0; i < tf_directions.size(); ++i) {
      if (tf_directions[i].axis == Axis::kC)
        throw ContractError("channel direction listed among T/F directions");
      for (std::size_t j = 0; j < i; ++j)
        if (tf_directions[i] == tf_directions[j])
          throw ContractError("duplicate direction " + tf_directions[i].name());
    }
  }
};

// kRow: every row of the grid is its own sequence (axis T: F rows of length
// T). kGrid: the rows are concatenated into one sequence per batch item, so
// the row enumeration order changes what the scan sees.
enum class ScanSpan : std::uint8_t { kRow, kGrid };

// Exact permutation between a grid tensor and its serialized sequences.
struct SerialMap {
  ScanDirection direction;
  ScanSpan span = ScanSpan::kRow;
  Shape grid_shape;
  Shape seq_shape;
  IndexMap forward;  // seq element i <- grid element forward[i]
  IndexMap inverse;  // grid element k <- seq element inverse[k]
};

inline SerialMap make_serial_map(const Shape& grid, const ScanDirection& dir,
                                 ScanSpan span = ScanSpan::kRow) {
  SerialMap m;
  m.direction = dir;
  m.span = span;
  m.grid_shape = grid;
  if (dir.axis == Axis::kC) {
    if (grid.size() != 3 || grid[1] != 1)
      throw ContractError("channel scan needs pooled (B, 1, C) input, got " +
                          shape_str(grid));
    if (dir.traversal != Traversal::kPrimary)
      throw ContractError("channel directions have no traversal order");
    const std::size_t B = grid[0], C = grid[2];
    m.seq_shape = {B, C, 1};
    auto fwd = std::make_shared<std::vector<std::uint32_t>>(B * C);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t l = 0; l < C; ++l) {
        const std::size_t c =
            dir.orientation == Orientation::kForward ? l : C - 1 - l;
        (*fwd)[b * C + l] = static_cast<std::uint32_t>(b * C + c);
      }
    auto inv = std::make_shared<std::vector<std::uint32_t>>(fwd->size());
    for (std::size_t i = 0; i < fwd->size(); ++i)
      (*inv)[(*fwd)[i]] = static_cast<std::uint32_t>(i);
    m.forward = std::move(fwd);
    m.inverse = std::move(inv);
    return m;
  }
  if (grid.size() != 4)
    throw ShapeError("serialize: expected (B, C, F, T), got " +
                     shape_str(grid));
  const std::size_t B = grid[0], C = grid[1], F = grid[2], T = grid[3];
  const bool along_t = dir.axis == Axis::kT;
  const std::size_t R = along_t ? F : T;  // rows
  const std::size_t L = along_t ? T : F;  // row length
  if (span == ScanSpan::kRow)
    m.seq_shape = {B * R, L, C};
  else
    m.seq_shape = {B, R * L, C};
  auto fwd = std::make_shared<std::vector<std::uint32_t>>(B * C * F * T);
  std::size_t i = 0;
  // Both spans enumerate (b, r, l, c) in the same flat order.
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t r = 0; r < R; ++r) {
      const std::size_t rr =
          dir.traversal == Traversal::kPrimary ? r : R - 1 - r;
      for (std::size_t l = 0; l < L; ++l) {
        const std::size_t ll =
            dir.orientation == Orientation::kForward ? l : L - 1 - l;
        const std::size_t f = along_t ? rr : ll;
        const std::size_t t = along_t ? ll : rr;
        for (std::size_t c = 0; c < C; ++c)
          (*fwd)[i++] =
              static_cast<std::uint32_t>(((b * C + c) * F + f) * T + t);
      }
    }
  auto inv = std::make_shared<std::vector<std::uint32_t>>(fwd->size());
  for (std::size_t k = 0; k < fwd->size(); ++k)
    (*inv)[(*fwd)[k]] = static_cast<std::uint32_t>(k);
  m.forward = std::move(fwd);
  m.inverse = std::move(inv);
  return m;
}

template <class T>
struct Serialized {
  Var<T> sequences;
  SerialMap map;
};

template <class T>
Serialized<T> serialize_direction(const Var<T>& z, const ScanDirection& dir,
                                  ScanSpan span = ScanSpan::kRow) {
  if (dir.axis == Axis::kC && z.shape().size() == 4)
    throw ContractError(
        "serialize: channel direction applied to a (B, C, F, T) tensor; "
        "the channel scan runs on the pooled (B, 1, C) representation");
  SerialMap m = make_serial_map(z.shape(), dir, span);
  Var<T> seq = gather(z, m.forward, m.seq_shape);
  return {std::move(seq), std::move(m)};
}

template <class T>
Var<T> deserialize_direction(const Var<T>& sequences, const SerialMap& map) {
  if (!map.forward || !map.inverse ||
      map.inverse->size() != shape_numel(map.grid_shape) ||
      sequences.shape() != map.seq_shape)
    throw ContractError("deserialize: sequences " +
                        shape_str(sequences.shape()) +
                        " do not match index map for " + map.direction.name() +
                        " over " + shape_str(map.grid_shape));
  return gather(sequences, map.inverse, map.grid_shape);
}

struct OAConfig {
  std::size_t channels = 24;
  ssm::MambaConfig mamba_tf;
  ssm::MambaConfig mamba_c;
  DirectionSet directions = DirectionSet::preset("10d_tfc");
  ScanSpan span = ScanSpan::kRow;
  bool mean_sum = false;      // average instead of sum over directions
  bool sigmoid_gate = false;  // squash Z0 before gating
  // Row span only: reuse the primary twin's output for a transposed
  // direction instead of recomputing the identical scan.
  bool fold_transposed = false;
};

// Channel-branch feature width inside mamba_c.
inline constexpr std::size_t kChannelBranchWidth = 8;

inline OAConfig oa_config(std::size_t channels, std::size_t d_state,
                          const DirectionSet& dirs) {
  dirs.validate();
  OAConfig c;
  c.channels = channels;
  c.mamba_tf = ssm::mamba_config(channels, d_state);
  c.mamba_c = ssm::mamba_config(1, d_state, kChannelBranchWidth);
  c.directions = dirs;
  return c;
}

// Parameters: conv_w (2C, C), conv_b (2C), mamba_tf.*, and mamba_c.* when the
// channel branch is on.
template <std::floating_point T>
void init_oa(ParamStore<T>& store, const std::string& prefix,
             const OAConfig& cfg, Rng& rng) {
  const std::size_t C = cfg.channels;
  store.add(prefix + ".conv_w", init::fan_in_uniform<T>({2 * C, C}, C, rng));
  store.add(prefix + ".conv_b", Tensor<T>({2 * C}));
  ssm::init_mamba(store, prefix + ".mamba_tf", cfg.mamba_tf, rng);
  if (cfg.directions.channel_branch)
    ssm::init_mamba(store, prefix + ".mamba_c", cfg.mamba_c, rng);
}

inline std::size_t oa_param_count(const OAConfig& cfg) {
  const std::size_t C = cfg.channels;
  return 2 * C * C + 2 * C + ssm::mamba_param_count(cfg.mamba_tf) +
         (cfg.directions.channel_branch ? ssm::mamba_param_count(cfg.mamba_c)
                                        : 0);
}

// Per T/F direction forward MACs: one shared-Mamba pass over all B*F*T
// positions, whatever the sequence split.
inline std::uint64_t oa_direction_macs(std::uint64_t B, std::uint64_t F,
                                       std::uint64_t T, const OAConfig& cfg) {
  return ssm::mamba_macs(1, B * F * T, cfg.mamba_tf);
}

// T/F directions that run a scan; a folded transposed direction reuses the
// output of a primary twin scanned earlier.
inline std::size_t scanned_directions(const OAConfig& cfg) {
  const auto& dirs = cfg.directions.tf_directions;
  std::size_t n = 0;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    const ScanDirection& d = dirs[i];
    if (cfg.fold_transposed && cfg.span == ScanSpan::kRow &&
        d.traversal == Traversal::kTransposed) {
      const ScanDirection twin{d.axis, d.orientation, Traversal::kPrimary};
      const auto it = std::find(dirs.begin(), dirs.end(), twin);
      if (it != dirs.end() && static_cast<std::size_t>(it - dirs.begin()) < i)
        continue;
    }
    ++n;
  }
  return n;
}

// Exact forward MACs of oa_forward.
//   conv 2C*C per position, scanned directions, Z0 gate C per position,
//   then with the channel branch: pooling C per position, two mamba_c passes
//   over (B, C), and the final gate C per position.
inline std::uint64_t oa_macs(std::uint64_t B, std::uint64_t F, std::uint64_t T,
                             const OAConfig& cfg) {
  const std::uint64_t C = cfg.channels, P = B * F * T;
  std::uint64_t n = P * 2 * C * C;
  n += scanned_directions(cfg) * oa_direction_macs(B, F, T, cfg);
  n += P * C;
  if (cfg.directions.channel_branch) {
    n += P * C;
    n += 2 * ssm::mamba_macs(B, C, cfg.mamba_c);
    n += P * C;
  }
  return n;
}

namespace detail {

template <class T>
void check_stage(const Var<T>& v, const char* stage) {
  if (!v.value().all_finite())
    throw NumericError(std::string("oa_forward: non-finite values after stage '") +
                       stage + "'");
}

}  // namespace detail

// U: (N_dir, B, C, F, T), one shared Mamba pass per direction.
template <class T>
Var<T> directional_scan_stack(const Scope<T>& mamba_tf, const OAConfig& cfg,
                              const Var<T>& z1) {
  if (cfg.directions.tf_directions.empty())
    throw ContractError("directional scan: empty direction set");
  const auto& dirs = cfg.directions.tf_directions;
  std::vector<Var<T>> outs;
  outs.reserve(dirs.size());
  for (const ScanDirection& d : dirs) {
    if (cfg.fold_transposed && cfg.span == ScanSpan::kRow &&
        d.traversal == Traversal::kTransposed) {
      const ScanDirection twin{d.axis, d.orientation, Traversal::kPrimary};
      const auto it = std::find(dirs.begin(), dirs.end(), twin);
      const auto k = static_cast<std::size_t>(it - dirs.begin());
      if (it != dirs.end() && k < outs.size()) {
        outs.push_back(outs[k]);
        continue;
      }
    }
    Serialized<T> s = serialize_direction(z1, d, cfg.span);
    Var<T> y = ssm::mamba_block(mamba_tf, cfg.mamba_tf, s.sequences);
    outs.push_back(deserialize_direction(y, s.map));
  }
  return stack(std::span<const Var<T>>(outs), 0);
}

// Pooled channel sequence scanned forward and reversed by mamba_c, summed:
// (B, C, F, T) -> (B, 1, C).
template <class T>
Var<T> channel_branch(const Scope<T>& mamba_c, const OAConfig& cfg,
                      const Var<T>& z2) {
  const Var<T> pooled = mean_pool_ft(z2);
  Var<T> total;
  bool first = true;
  for (Orientation o : {Orientation::kForward, Orientation::kBackward}) {
    Serialized<T> s = serialize_direction(pooled, {Axis::kC, o}, cfg.span);
    Var<T> y = ssm::mamba_block(mamba_c, cfg.mamba_c, s.sequences);
    Var<T> back = deserialize_direction(y, s.map);
    total = first ? back : add(total, back);
    first = false;
  }
  return total;
}

// (B, C, F, T) -> (B, C, F, T).
template <class T>
Var<T> oa_forward(const Scope<T>& p, const OAConfig& cfg, const Var<T>& z) {
  const Shape& s = z.shape();
  if (s.size() != 4 || s[1] != cfg.channels)
    throw ShapeError("oa_forward: expected (B, " +
                     std::to_string(cfg.channels) + ", F, T), got " +
                     shape_str(s));
  const Var<T> doubled = conv1x1(z, p["conv_w"], p["conv_b"]);
  detail::check_stage(doubled, "conv_double");
  const auto halves = split(doubled, 1, 2);
  const Var<T>& z0 = halves[0];
  const Var<T>& z1 = halves[1];

  const Var<T> u = directional_scan_stack(p.sub("mamba_tf"), cfg, z1);
  detail::check_stage(u, "directional_scan");
  Var<T> summed = sum(u, 0);
  if (cfg.mean_sum)
    summed = scale(summed, T(1) / static_cast<T>(u.dim(0)));
  const Var<T> gate = cfg.sigmoid_gate ? sigmoid(z0) : z0;
  const Var<T> z2 = mul(gate, summed);
  detail::check_stage(z2, "gate");
  if (!cfg.directions.channel_branch) return z2;

  const Var<T> zc = channel_branch(p.sub("mamba_c"), cfg, z2);
  detail::check_stage(zc, "channel_branch");
  const Var<T> g = reshape(zc, {s[0], s[1], 1, 1});
  const Var<T> out = add(mul(z2, g), z2);
  detail::check_stage(out, "residual");
  return out;
}

}  // namespace omniscan
