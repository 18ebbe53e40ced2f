#pragma once

// Gradient-consistency analysis through the empirical NTK.
//
// J holds one per-example loss gradient per row (over the fusion block),
// Theta = J J^T, u is Theta's top eigenvector and g = u^T J is the dominant
// gradient direction of a sample set. GC compares a group's g with the
// direction of the whole set by cosine similarity.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "remind/drotrain.hpp"
#include "remind/moefusion.hpp"
#include "remind/synthdata.hpp"

namespace remind {

struct JacobianBlock {
  Matrix j;  // samples x flattened parameter count
  std::vector<std::string> names;
};

// Attention, shared router (and scale when learnable) and all experts.
std::vector<ad::Parameter*> fusion_parameters(RemindModel& model);

// One backward pass per sample; never creates residuals.
JacobianBlock per_example_grads(RemindModel& model, std::span<const Sample* const> samples,
                                std::span<ad::Parameter* const> subset, Phase phase = Phase::Stage1SharedOnly,
                                LossKind loss = LossKind::Focal, double focal_gamma = 2.0);

Matrix ntk(const Matrix& j);

struct PowerOptions {
  double tol = 1e-10;
  int max_iter = 10000;
  std::uint64_t seed = 0;
};

struct EigenPair {
  double value = 0.0;
  std::vector<double> vector;
  bool zero = false;        // Theta == 0, direction undefined
  bool non_unique = false;  // top two eigenvalues within 1e-6 relative
  bool converged = false;
  int iterations = 0;
};

// Sign rule: sum(u) >= 0; if the sum is exactly 0, first nonzero entry > 0.
void canonicalize_sign(std::vector<double>& u);

EigenPair top_eigvec(const Matrix& theta, const PowerOptions& opt = {});

// g = u^T J
std::vector<double> dominant_direction(const Matrix& j, std::span<const double> u);

struct Consistency {
  double gc = 0.0;
  bool defined = false;  // false when either vector is zero
};

Consistency consistency(std::span<const double> g_all, std::span<const double> g_group);

struct Direction {
  std::vector<double> g;
  EigenPair eig;
};

Direction direction_of(const Matrix& j, const PowerOptions& opt = {});

enum class WholeDirection { UnionOfDraws, Empirical };
WholeDirection parse_whole_direction(const std::string& s);
const char* to_string(WholeDirection w);

struct TrackOptions {
  int samples_per_group = 32;
  std::uint64_t seed = 0;
  WholeDirection whole = WholeDirection::UnionOfDraws;
  Phase phase = Phase::Stage1SharedOnly;
  LossKind loss = LossKind::Focal;
  double focal_gamma = 2.0;
  PowerOptions power;
};

struct ConsistencyRecord {
  int step = 0;
  std::uint32_t group_bitmask = 0;  // 0 denotes the whole set
  double gc = 0.0;
  bool defined = true;
  int n_used = 0;
  std::vector<std::string> flags;
};

// Equal-size draw per group (with replacement, flagged, when a group is small).
struct GroupDraw {
  int group_id = 0;
  std::vector<std::size_t> indices;
  bool with_replacement = false;
};

std::vector<GroupDraw> draw_groups(const Dataset& data, int samples_per_group, std::uint64_t seed);

std::vector<ConsistencyRecord> analyze_checkpoint(RemindModel& model, int step, const Dataset& data,
                                                  const TrackOptions& opt);
std::vector<ConsistencyRecord> track(std::span<const std::pair<int, RemindModel*>> checkpoints, const Dataset& data,
                                     const TrackOptions& opt);

// step,group_bitmask,gc,n_used,flags (gc blank when undefined, flags ';'-joined)
void write_consistency_csv(std::ostream& os, std::span<const ConsistencyRecord> records);

}  // namespace remind
