#include "remind/gradanalysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "remind/rng.hpp"

namespace remind {

std::vector<ad::Parameter*> fusion_parameters(RemindModel& model) {
  return model.parameters(kAttention | kRouter | kExperts);
}

JacobianBlock per_example_grads(RemindModel& model, std::span<const Sample* const> samples,
                                std::span<ad::Parameter* const> subset, Phase phase, LossKind loss,
                                double focal_gamma) {
  if (subset.empty()) throw std::invalid_argument("per_example_grads: empty parameter subset");
  if (samples.empty()) throw std::invalid_argument("per_example_grads: no samples");
  std::size_t p = 0;
  JacobianBlock out;
  for (const ad::Parameter* prm : subset) {
    p += prm->value.size();
    out.names.push_back(prm->name);
  }
  out.j = Matrix(samples.size(), p);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (ad::Parameter* prm : subset) prm->zero_grad();
    ad::Tape tape;
    ad::Var l = model.loss(tape, *samples[i], phase, loss, focal_gamma, false);
    tape.backward(l);
    auto row = out.j.row_span(i);
    std::size_t off = 0;
    for (const ad::Parameter* prm : subset) {
      const auto g = prm->grad.values();
      std::copy(g.begin(), g.end(), row.begin() + static_cast<std::ptrdiff_t>(off));
      off += g.size();
    }
  }
  for (ad::Parameter* prm : subset) prm->zero_grad();
  if (!out.j.all_finite()) throw std::runtime_error("per_example_grads: non-finite gradient");
  return out;
}

Matrix ntk(const Matrix& j) {
  Matrix t = matmul_nt(j, j);
  // mirror so the result is exactly symmetric
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = r + 1; c < t.cols(); ++c) t(c, r) = t(r, c);
  return t;
}

void canonicalize_sign(std::vector<double>& u) {
  const double s = std::accumulate(u.begin(), u.end(), 0.0);
  bool flip = s < 0.0;
  if (s == 0.0) {
    auto it = std::find_if(u.begin(), u.end(), [](double v) { return v != 0.0; });
    flip = it != u.end() && *it < 0.0;
  }
  if (flip)
    for (double& v : u) v = -v;
}

namespace {

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  std::vector<double> y(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row_span(r), x);
  return y;
}

struct PowerResult {
  std::vector<double> u;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

// Plain power iteration on a PSD matrix from a unit start vector.
PowerResult power(const Matrix& a, std::vector<double> u, double tol, int max_iter) {
  PowerResult res;
  for (int it = 1; it <= max_iter; ++it) {
    std::vector<double> v = matvec(a, u);
    const double nv = norm2(v);
    res.iterations = it;
    if (nv == 0.0) {
      res.u = std::move(u);
      res.value = 0.0;
      res.converged = true;
      return res;
    }
    double diff = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
      v[i] /= nv;
      diff += (v[i] - u[i]) * (v[i] - u[i]);
    }
    u = std::move(v);
    if (std::sqrt(diff) < tol) {
      res.converged = true;
      break;
    }
  }
  res.value = dot(u, matvec(a, u));
  res.u = std::move(u);
  return res;
}

}  // namespace

EigenPair top_eigvec(const Matrix& theta, const PowerOptions& opt) {
  if (theta.rows() != theta.cols() || theta.rows() == 0)
    throw ShapeError("top_eigvec: expected a non-empty square matrix, got " + theta.shape_str());
  if (!(opt.tol > 0.0) || opt.max_iter < 1) throw std::invalid_argument("top_eigvec: tol > 0 and max_iter >= 1 required");
  const std::size_t n = theta.rows();
  EigenPair out;
  if (std::all_of(theta.values().begin(), theta.values().end(), [](double v) { return v == 0.0; })) {
    out.zero = true;
    out.converged = true;
    out.vector.assign(n, 0.0);
    return out;
  }
  Rng rng = make_rng(opt.seed, stream::kPowerIteration);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> start(n);
  for (double& v : start) v = normal(rng);
  const double ns = norm2(start);
  for (double& v : start) v /= ns;

  PowerResult top = power(theta, start, opt.tol, opt.max_iter);
  out.value = top.value;
  out.iterations = top.iterations;
  out.converged = top.converged;
  out.vector = std::move(top.u);
  canonicalize_sign(out.vector);

  if (n > 1) {
    // Deflate and estimate the runner-up to detect a degenerate top eigenvalue.
    Matrix defl = theta;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) defl(r, c) -= out.value * out.vector[r] * out.vector[c];
    std::vector<double> probe = start;
    const double proj = dot(probe, out.vector);
    for (std::size_t i = 0; i < n; ++i) probe[i] -= proj * out.vector[i];
    const double np = norm2(probe);
    if (np > 0.0) {
      for (double& v : probe) v /= np;
      const PowerResult second = power(defl, probe, opt.tol, std::min(opt.max_iter, 2000));
      out.non_unique = std::abs(out.value - second.value) <= 1e-6 * std::abs(out.value);
    }
  }
  return out;
}

std::vector<double> dominant_direction(const Matrix& j, std::span<const double> u) {
  if (u.size() != j.rows())
    throw ShapeError("dominant_direction: u has " + std::to_string(u.size()) + " entries, J has " +
                     std::to_string(j.rows()) + " rows");
  std::vector<double> g(j.cols(), 0.0);
  for (std::size_t r = 0; r < j.rows(); ++r) {
    const auto row = j.row_span(r);
    for (std::size_t c = 0; c < j.cols(); ++c) g[c] += u[r] * row[c];
  }
  return g;
}

Consistency consistency(std::span<const double> g_all, std::span<const double> g_group) {
  if (g_all.size() != g_group.size()) throw ShapeError("consistency: direction lengths differ");
  const double aa = dot(g_all, g_all), bb = dot(g_group, g_group);
  if (aa == 0.0 || bb == 0.0) return {};
  // sqrt(x * x) == x, so identical inputs give exactly 1
  const double c = dot(g_all, g_group) / std::sqrt(aa * bb);
  return {std::clamp(c, -1.0, 1.0), true};
}

Direction direction_of(const Matrix& j, const PowerOptions& opt) {
  Direction d;
  d.eig = top_eigvec(ntk(j), opt);
  d.g = dominant_direction(j, d.eig.vector);
  return d;
}

WholeDirection parse_whole_direction(const std::string& s) {
  if (s == "union") return WholeDirection::UnionOfDraws;
  if (s == "empirical") return WholeDirection::Empirical;
  throw std::invalid_argument("unknown whole-set direction '" + s + "' (expected union, empirical)");
}

const char* to_string(WholeDirection w) { return w == WholeDirection::UnionOfDraws ? "union" : "empirical"; }

std::vector<GroupDraw> draw_groups(const Dataset& data, int samples_per_group, std::uint64_t seed) {
  if (samples_per_group < 1) throw std::invalid_argument("samples_per_group must be >= 1");
  std::vector<std::vector<std::size_t>> members(group_count(data.spec.modalities));
  for (std::size_t i = 0; i < data.samples.size(); ++i) members.at(data.samples[i].group_id).push_back(i);
  std::vector<GroupDraw> out;
  const auto k = static_cast<std::size_t>(samples_per_group);
  for (std::size_t g = 0; g < members.size(); ++g) {
    if (members[g].empty()) continue;
    Rng rng = make_rng(mix_seed(seed, g), stream::kAnalysis);
    GroupDraw d;
    d.group_id = static_cast<int>(g);
    auto& m = members[g];
    if (m.size() >= k) {
      std::shuffle(m.begin(), m.end(), rng);
      d.indices.assign(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(k));
      std::sort(d.indices.begin(), d.indices.end());
    } else {
      d.with_replacement = true;
      std::uniform_int_distribution<std::size_t> pick(0, m.size() - 1);
      for (std::size_t i = 0; i < k; ++i) d.indices.push_back(m[pick(rng)]);
    }
    out.push_back(std::move(d));
  }
  return out;
}

namespace {

std::vector<const Sample*> gather(const Dataset& data, std::span<const std::size_t> idx) {
  std::vector<const Sample*> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(&data.samples[i]);
  return out;
}

void add_eigen_flags(ConsistencyRecord& rec, const EigenPair& e) {
  if (e.non_unique) rec.flags.emplace_back("non-unique");
  if (!e.converged) rec.flags.emplace_back("not-converged");
}

}  // namespace

std::vector<ConsistencyRecord> analyze_checkpoint(RemindModel& model, int step, const Dataset& data,
                                                  const TrackOptions& opt) {
  if (data.samples.empty()) throw std::invalid_argument("analysis dataset is empty");
  const auto draws = draw_groups(data, opt.samples_per_group, opt.seed);
  const auto params = fusion_parameters(model);

  std::vector<std::size_t> whole_idx;
  if (opt.whole == WholeDirection::UnionOfDraws) {
    for (const auto& d : draws) whole_idx.insert(whole_idx.end(), d.indices.begin(), d.indices.end());
  } else {
    std::vector<std::size_t> all(data.samples.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    Rng rng = make_rng(mix_seed(opt.seed, 0xE3), stream::kAnalysis);
    std::shuffle(all.begin(), all.end(), rng);
    const std::size_t n = std::min(all.size(), draws.size() * static_cast<std::size_t>(opt.samples_per_group));
    whole_idx.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n));
    std::sort(whole_idx.begin(), whole_idx.end());
  }

  auto direction = [&](std::span<const std::size_t> idx) {
    const auto samples = gather(data, idx);
    const JacobianBlock jb = per_example_grads(model, samples, params, opt.phase, opt.loss, opt.focal_gamma);
    return direction_of(jb.j, opt.power);
  };

  std::vector<ConsistencyRecord> out;
  const Direction whole = direction(whole_idx);
  ConsistencyRecord all_rec{step, 0, 0.0, true, static_cast<int>(whole_idx.size()), {}};
  const Consistency self = consistency(whole.g, whole.g);
  all_rec.gc = self.gc;
  all_rec.defined = self.defined;
  if (!self.defined) all_rec.flags.emplace_back("undefined");
  add_eigen_flags(all_rec, whole.eig);
  out.push_back(all_rec);

  for (const auto& d : draws) {
    // A single group's union draw is the whole draw; reuse it so GC is exactly 1.
    const Direction gd = (opt.whole == WholeDirection::UnionOfDraws && draws.size() == 1) ? whole : direction(d.indices);
    ConsistencyRecord rec{step, ModalityMask::from_group_id(d.group_id).bits, 0.0, true,
                          static_cast<int>(d.indices.size()), {}};
    const Consistency c = consistency(whole.g, gd.g);
    rec.gc = c.gc;
    rec.defined = c.defined;
    if (!c.defined) rec.flags.emplace_back("undefined");
    if (d.with_replacement) rec.flags.emplace_back("with-replacement");
    add_eigen_flags(rec, gd.eig);
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<ConsistencyRecord> track(std::span<const std::pair<int, RemindModel*>> checkpoints, const Dataset& data,
                                     const TrackOptions& opt) {
  std::vector<ConsistencyRecord> out;
  for (const auto& [step, model] : checkpoints) {
    auto recs = analyze_checkpoint(*model, step, data, opt);
    out.insert(out.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  return out;
}

void write_consistency_csv(std::ostream& os, std::span<const ConsistencyRecord> records) {
  os << "step,group_bitmask,gc,n_used,flags\n";
  std::string line;
  for (const auto& r : records) {
    line = std::to_string(r.step) + ',' + std::to_string(r.group_bitmask) + ',';
    if (r.defined) append_double(line, r.gc);
    line += ',' + std::to_string(r.n_used) + ',';
    for (std::size_t i = 0; i < r.flags.size(); ++i) {
      if (i) line += ';';
      line += r.flags[i];
    }
    line += '\n';
    os << line;
  }
}

}  // namespace remind
