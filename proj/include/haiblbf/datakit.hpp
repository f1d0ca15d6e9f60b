#pragma once

// Multi-label datasets: storage, LIBSVM multilabel I/O, synthetic
// generators, standardization and seeded train/test splits.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "haiblbf/errors.hpp"
#include "haiblbf/random.hpp"

namespace haiblbf::data {

/// Dense contexts with label sets over an action space {0, ..., l-1}.
/// Choosing any label of an instance earns reward 1, anything else 0.
class MultiLabelDataset {
 public:
  MultiLabelDataset() = default;
  MultiLabelDataset(std::size_t num_features, std::size_t num_actions)
      : num_features_(num_features), num_actions_(num_actions) {}

  void add(std::span<const double> x, std::vector<std::size_t> labels) {
    if (x.size() != num_features_) {
      throw ShapeError("instance has " + std::to_string(x.size()) + " features, dataset has " +
                       std::to_string(num_features_));
    }
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    if (!labels.empty() && labels.back() >= num_actions_) {
      throw DataError("label " + std::to_string(labels.back()) + " outside action space of size " +
                      std::to_string(num_actions_));
    }
    features_.insert(features_.end(), x.begin(), x.end());
    labels_.push_back(std::move(labels));
  }

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  std::size_t num_features() const { return num_features_; }
  std::size_t num_actions() const { return num_actions_; }

  std::span<const double> features(std::size_t i) const {
    return {features_.data() + i * num_features_, num_features_};
  }
  std::span<double> mutable_features(std::size_t i) {
    return {features_.data() + i * num_features_, num_features_};
  }
  const std::vector<std::size_t>& labels(std::size_t i) const { return labels_[i]; }

  bool has_label(std::size_t i, std::size_t action) const {
    const auto& y = labels_[i];
    return std::binary_search(y.begin(), y.end(), action);
  }

  /// Instances without any label; every action earns 0 on them.
  bool unlabeled(std::size_t i) const { return labels_[i].empty(); }

  std::vector<std::size_t> unlabeled_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i) {
      if (unlabeled(i)) out.push_back(i);
    }
    return out;
  }

  MultiLabelDataset subset(std::span<const std::size_t> indices) const {
    MultiLabelDataset out(num_features_, num_actions_);
    out.seed = seed;
    for (std::size_t i : indices) out.add(features(i), labels_[i]);
    return out;
  }

  /// Provenance recorded in snapshots; 0 for parsed external data.
  std::uint64_t seed = 0;

  bool operator==(const MultiLabelDataset& o) const {
    return num_features_ == o.num_features_ && num_actions_ == o.num_actions_ &&
           features_ == o.features_ && labels_ == o.labels_;
  }

 private:
  std::size_t num_features_ = 0;
  std::size_t num_actions_ = 0;
  std::vector<double> features_;
  std::vector<std::vector<std::size_t>> labels_;
};

// ---------------------------------------------------------------------------
// LIBSVM multilabel text format
//
//   <l1,l2,...> <i1>:<v1> <i2>:<v2> ...
//
// Labels are 0-based action indices, feature indices are 1-based. A line
// whose first token already contains ':' has no labels. Blank lines and
// lines starting with '#' are skipped, except the snapshot header
//
//   # haiblbf-dataset n=<N> d=<D> l=<L> seed=<S>
//
// which pins the dimensions (and is checked against the instance count).

struct ParseOptions {
  std::size_t num_features = 0;  // 0: use the largest index seen
  std::size_t num_actions = 0;   // 0: largest label + 1
};

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\r')) ++i;
    std::size_t j = i;
    while (j < s.size() && s[j] != ' ' && s[j] != '\t' && s[j] != '\r') ++j;
    if (j > i) out.push_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

template <class T>
bool parse_number(std::string_view tok, T& out) {
  if (tok.empty()) return false;
  const char* first = tok.data();
  if constexpr (std::is_floating_point_v<T>) {
    if (*first == '+') ++first;
  }
  auto res = std::from_chars(first, tok.data() + tok.size(), out);
  return res.ec == std::errc() && res.ptr == tok.data() + tok.size();
}

inline void format_double(std::ostream& os, double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  os.write(buf, res.ptr - buf);
}

struct Header {
  bool present = false;
  std::size_t n = 0, d = 0, l = 0;
  std::uint64_t seed = 0;
};

inline bool parse_header(std::string_view line, Header& h) {
  const auto toks = split_ws(line);
  if (toks.size() < 2 || toks[0] != "#" || toks[1] != "haiblbf-dataset") return false;
  for (std::size_t k = 2; k < toks.size(); ++k) {
    const auto eq = toks[k].find('=');
    if (eq == std::string_view::npos) return false;
    const auto key = toks[k].substr(0, eq);
    const auto val = toks[k].substr(eq + 1);
    bool ok = true;
    if (key == "n") ok = parse_number(val, h.n);
    else if (key == "d") ok = parse_number(val, h.d);
    else if (key == "l") ok = parse_number(val, h.l);
    else if (key == "seed") ok = parse_number(val, h.seed);
    if (!ok) return false;
  }
  h.present = true;
  return true;
}

}  // namespace detail

inline MultiLabelDataset parse_libsvm_multilabel(std::istream& in, ParseOptions opts = {}) {
  struct Row {
    std::vector<std::size_t> labels;
    std::vector<std::pair<std::size_t, double>> feats;
  };
  std::vector<Row> rows;
  detail::Header header;
  std::size_t max_index = 0;
  std::size_t max_label_plus_one = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto toks = detail::split_ws(line);
    if (toks.empty()) continue;
    if (toks[0].front() == '#') {
      if (rows.empty() && !header.present) {
        detail::Header h;
        if (detail::parse_header(line, h)) header = h;
      }
      continue;
    }
    Row row;
    std::size_t k = 0;
    if (toks[0].find(':') == std::string_view::npos) {
      std::string_view lab = toks[0];
      std::size_t start = 0;
      while (start <= lab.size()) {
        const auto comma = lab.find(',', start);
        const auto piece = lab.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
        std::size_t label = 0;
        if (piece.empty() || piece.front() == '-' || !detail::parse_number(piece, label)) {
          throw ParseError(line_no, "malformed label '" + std::string(piece) + "'");
        }
        row.labels.push_back(label);
        max_label_plus_one = std::max(max_label_plus_one, label + 1);
        if (comma == std::string_view::npos) break;
        start = comma + 1;
      }
      k = 1;
    }
    for (; k < toks.size(); ++k) {
      const auto tok = toks[k];
      const auto colon = tok.find(':');
      if (colon == std::string_view::npos) {
        throw ParseError(line_no, "expected index:value, got '" + std::string(tok) + "'");
      }
      const auto idx_s = tok.substr(0, colon);
      const auto val_s = tok.substr(colon + 1);
      std::size_t index = 0;
      if (idx_s.empty() || idx_s.front() == '-' || !detail::parse_number(idx_s, index) || index == 0) {
        throw ParseError(line_no, "malformed feature index '" + std::string(idx_s) + "'");
      }
      double value = 0.0;
      if (!detail::parse_number(val_s, value) || !std::isfinite(value)) {
        throw ParseError(line_no, "malformed feature value '" + std::string(val_s) + "'");
      }
      row.feats.emplace_back(index, value);
      max_index = std::max(max_index, index);
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw EmptyDatasetError("no instances in input");

  std::size_t d = opts.num_features ? opts.num_features : (header.present ? header.d : max_index);
  std::size_t l = opts.num_actions ? opts.num_actions : (header.present ? header.l : max_label_plus_one);
  if (max_index > d) throw DataError("feature index " + std::to_string(max_index) + " exceeds declared dimension");
  if (max_label_plus_one > l) throw DataError("label exceeds declared action space");
  if (d == 0) d = 1;
  if (l == 0) throw DataError("no labels anywhere; action space size unknown");
  if (header.present && header.n != rows.size()) {
    throw DataError("header declares " + std::to_string(header.n) + " instances, found " +
                    std::to_string(rows.size()));
  }

  MultiLabelDataset ds(d, l);
  ds.seed = header.seed;
  std::vector<double> x(d);
  for (auto& row : rows) {
    std::fill(x.begin(), x.end(), 0.0);
    for (auto [idx, v] : row.feats) x[idx - 1] = v;
    ds.add(x, std::move(row.labels));
  }
  return ds;
}

inline MultiLabelDataset parse_libsvm_multilabel(std::string_view text, ParseOptions opts = {}) {
  std::istringstream is{std::string(text)};
  return parse_libsvm_multilabel(is, opts);
}

/// Writes the snapshot header followed by one LIBSVM line per instance.
/// Zero-valued features are omitted.
inline void write_libsvm_multilabel(std::ostream& os, const MultiLabelDataset& ds, bool with_header = true) {
  if (with_header) {
    os << "# haiblbf-dataset n=" << ds.size() << " d=" << ds.num_features() << " l=" << ds.num_actions()
       << " seed=" << ds.seed << "\n";
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& y = ds.labels(i);
    for (std::size_t k = 0; k < y.size(); ++k) {
      if (k) os << ',';
      os << y[k];
    }
    const auto x = ds.features(i);
    bool any = false;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] == 0.0) continue;
      if (!y.empty() || any) os << ' ';
      os << (j + 1) << ':';
      detail::format_double(os, x[j]);
      any = true;
    }
    // An unlabeled all-zero instance would otherwise be a blank line.
    if (y.empty() && !any) os << "1:0";
    os << '\n';
  }
}

inline std::string to_libsvm_string(const MultiLabelDataset& ds, bool with_header = true) {
  std::ostringstream os;
  write_libsvm_multilabel(os, ds, with_header);
  return os.str();
}

// ---------------------------------------------------------------------------
// Standardization: per-feature z-score fitted on one set, applied to others.

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> scale;

  static Standardizer fit(const MultiLabelDataset& ds) {
    Standardizer s;
    const std::size_t d = ds.num_features();
    s.mean.assign(d, 0.0);
    s.scale.assign(d, 1.0);
    if (ds.empty()) return s;
    const double n = static_cast<double>(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto x = ds.features(i);
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += x[j];
    }
    for (double& m : s.mean) m /= n;
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto x = ds.features(i);
      for (std::size_t j = 0; j < d; ++j) var[j] += (x[j] - s.mean[j]) * (x[j] - s.mean[j]);
    }
    for (std::size_t j = 0; j < d; ++j) {
      const double sd = std::sqrt(var[j] / n);
      s.scale[j] = sd > 1e-12 ? sd : 1.0;
    }
    return s;
  }

  MultiLabelDataset apply(const MultiLabelDataset& ds) const {
    MultiLabelDataset out = ds;
    for (std::size_t i = 0; i < out.size(); ++i) {
      auto x = out.mutable_features(i);
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = (x[j] - mean[j]) / scale[j];
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Synthetic generators

struct SyntheticSpec {
  std::size_t n = 1000;
  std::size_t d = 10;
  std::size_t l = 5;
  double label_noise = 0.0;     // chance of one extra label besides the cluster's own
  double center_scale = 1.0;    // cluster centers ~ N(0, center_scale^2 I)
  double cluster_spread = 1.0;  // instances ~ N(center, cluster_spread^2 I)
  /// Share of instances drawn from one extra cluster whose label is uniform
  /// over all l actions, i.e. not predictable from the features.
  double ambiguous_fraction = 0.0;
  std::uint64_t seed = 0;
};

/// Gaussian mixture with one cluster per label. Each instance is labeled with
/// its cluster and, with probability `label_noise`, one extra label drawn
/// uniformly from the remaining l-1. With `ambiguous_fraction` > 0 an extra
/// cluster is added whose instances take a uniformly drawn primary label.
inline MultiLabelDataset make_synthetic_multilabel(const SyntheticSpec& spec) {
  if (spec.n == 0 || spec.d == 0 || spec.l == 0) throw std::invalid_argument("n, d and l must be at least 1");
  if (!(spec.label_noise >= 0.0 && spec.label_noise <= 1.0)) {
    throw std::invalid_argument("label_noise must lie in [0, 1]");
  }
  if (!(spec.cluster_spread >= 0.0) || !(spec.center_scale >= 0.0)) {
    throw std::invalid_argument("scales must be non-negative");
  }
  if (!(spec.ambiguous_fraction >= 0.0 && spec.ambiguous_fraction < 1.0)) {
    throw std::invalid_argument("ambiguous_fraction must lie in [0, 1)");
  }
  Rng rng = make_rng(derive_seed(spec.seed, "synthetic-multilabel"));
  const bool ambiguous = spec.ambiguous_fraction > 0.0;
  std::vector<double> centers((spec.l + (ambiguous ? 1 : 0)) * spec.d);
  for (double& c : centers) c = spec.center_scale * standard_normal(rng);

  MultiLabelDataset ds(spec.d, spec.l);
  ds.seed = spec.seed;
  std::vector<double> x(spec.d);
  for (std::size_t i = 0; i < spec.n; ++i) {
    const bool in_ambiguous = ambiguous && bernoulli(rng, spec.ambiguous_fraction);
    const std::size_t cluster = uniform_index(rng, spec.l);
    const std::size_t center = in_ambiguous ? spec.l : cluster;
    for (std::size_t j = 0; j < spec.d; ++j) {
      x[j] = centers[center * spec.d + j] + spec.cluster_spread * standard_normal(rng);
    }
    std::vector<std::size_t> labels{cluster};
    if (spec.l > 1 && bernoulli(rng, spec.label_noise)) {
      std::size_t extra = uniform_index(rng, spec.l - 1);
      if (extra >= cluster) ++extra;
      labels.push_back(extra);
    }
    ds.add(x, std::move(labels));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Two-dimensional treatment-compliance construction.
//
// Binary actions: 1 = treat, 0 = do not treat. A complier is labeled {1},
// a non-complier {0}. Instances come from four tight Gaussian blobs on the
// corners of a square, compliers on one diagonal and non-compliers on the
// other, so no half-plane classifies all four. The simulated expert treats
// only when both coordinates are positive. That boundary is not a line; it
// is exact on the lower-left blob (the expert's region) and wrong on the
// other three.
//
// The best half-plane policy gives up the lighter upper-right blob, where
// the expert is wrong too, so a router fitted after that policy gains
// nothing. A policy that instead gives up the lower-left blob, with a
// half-plane router sending that corner to the expert, classifies every
// instance correctly.

struct ComplianceBlob {
  double x0;
  double x1;
  std::size_t action;  // the rewarded action
  double weight;       // relative mass
  bool expert_region;
};

inline const std::vector<ComplianceBlob>& compliance_blobs() {
  static const std::vector<ComplianceBlob> blobs = {
      {-2.0, 2.0, 1, 3.0, false},
      {2.0, -2.0, 1, 3.0, false},
      {-2.0, -2.0, 0, 3.0, true},
      {2.0, 2.0, 0, 2.0, false},
  };
  return blobs;
}

inline constexpr double kComplianceBlobSpread = 0.15;

/// The expert's decision rule: treat iff both coordinates are positive.
inline std::size_t compliance_expert_action(std::span<const double> x) { return x[0] > 0.0 && x[1] > 0.0 ? 1 : 0; }

struct ComplianceInstance {
  MultiLabelDataset dataset;
  std::vector<bool> expert_region;  // per instance
};

inline ComplianceInstance make_compliance_2d(std::size_t n, std::uint64_t seed) {
  if (n < 4) throw std::invalid_argument("make_compliance_2d needs n >= 4");
  const auto& blobs = compliance_blobs();
  std::vector<double> weights;
  for (const auto& b : blobs) weights.push_back(b.weight);
  Rng rng = make_rng(derive_seed(seed, "compliance-2d"));
  ComplianceInstance inst{MultiLabelDataset(2, 2), {}};
  inst.dataset.seed = seed;
  for (std::size_t i = 0; i < n; ++i) {
    // Cycle through every blob first so each appears at least once.
    const std::size_t k = i < blobs.size() ? i : sample_categorical(rng, weights);
    const auto& b = blobs[k];
    const double x[2] = {b.x0 + kComplianceBlobSpread * standard_normal(rng),
                         b.x1 + kComplianceBlobSpread * standard_normal(rng)};
    inst.dataset.add(x, {b.action});
    inst.expert_region.push_back(b.expert_region);
  }
  return inst;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  double test_fraction = 0.25;
  std::uint64_t seed = 0;
};

/// Seeded partition with |test| = round(test_fraction * N); both parts keep
/// the original instance order.
inline std::pair<MultiLabelDataset, MultiLabelDataset> split(const MultiLabelDataset& ds, const SplitSpec& spec) {
  if (ds.empty()) throw EmptyDatasetError("cannot split an empty dataset");
  if (!(spec.test_fraction > 0.0 && spec.test_fraction < 1.0)) {
    throw std::invalid_argument("test_fraction must lie strictly between 0 and 1");
  }
  std::vector<std::size_t> perm(ds.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng rng = make_rng(derive_seed(spec.seed, "split"));
  shuffle(perm, rng);
  const auto n_test = static_cast<std::size_t>(std::llround(spec.test_fraction * static_cast<double>(ds.size())));
  std::vector<std::size_t> test(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::vector<std::size_t> train(perm.begin() + static_cast<std::ptrdiff_t>(n_test), perm.end());
  std::sort(test.begin(), test.end());
  std::sort(train.begin(), train.end());
  return {ds.subset(train), ds.subset(test)};
}

}  // namespace haiblbf::data
