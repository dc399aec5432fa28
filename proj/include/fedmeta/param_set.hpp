#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fedmeta {

struct LayoutEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::size_t offset = 0;
  std::size_t size = 0;

  bool operator==(const LayoutEntry &) const = default;
};

// Ordered (name, shape) table describing how a flat vector is carved into
// named tensors.
class Layout {
public:
  Layout() = default;
  void add(std::string name, std::vector<std::size_t> shape);

  const std::vector<LayoutEntry> &entries() const { return entries_; }
  std::size_t total_len() const { return total_; }
  const LayoutEntry &at(std::size_t i) const { return entries_.at(i); }
  const LayoutEntry &find(const std::string &name) const;

  bool operator==(const Layout &o) const { return entries_ == o.entries_; }

private:
  std::vector<LayoutEntry> entries_;
  std::size_t total_ = 0;
};

// Flat f64 parameter vector with a shared, immutable layout. This is the unit
// exchanged between clients and server.
class ParamSet {
public:
  ParamSet() = default;
  explicit ParamSet(std::shared_ptr<const Layout> layout, double fill = 0.0);
  ParamSet(std::shared_ptr<const Layout> layout, std::vector<double> values);

  const Layout &layout() const { return *layout_; }
  const std::shared_ptr<const Layout> &layout_ptr() const { return layout_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return !layout_; }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }
  double &operator[](std::size_t i) { return values_[i]; }

  std::span<const double> tensor(std::size_t entry) const;
  std::span<double> tensor(std::size_t entry);
  std::span<const double> tensor(const std::string &name) const;

  bool same_layout(const ParamSet &o) const;
  // Throws LayoutError when layouts differ.
  void require_same_layout(const ParamSet &o, const char *op) const;

  bool all_finite() const;
  // FNV-1a over the little-endian value bytes; identifies a trajectory point.
  std::uint64_t hash() const;

  ParamSet &operator+=(const ParamSet &o);
  ParamSet &operator-=(const ParamSet &o);
  ParamSet &operator*=(double s);
  // this += s * o
  ParamSet &axpy(double s, const ParamSet &o);

  bool operator==(const ParamSet &o) const {
    return same_layout(o) && values_ == o.values_;
  }

private:
  std::shared_ptr<const Layout> layout_;
  std::vector<double> values_;
};

ParamSet operator+(ParamSet a, const ParamSet &b);
ParamSet operator-(ParamSet a, const ParamSet &b);
ParamSet operator*(double s, ParamSet a);

// Convex combination sum_k weights[k] * models[k]. Weights must be
// non-negative and sum to 1 within 1e-9.
ParamSet weighted_sum(std::span<const ParamSet> models,
                      std::span<const double> weights);

// Binary format, all integers and doubles little-endian:
//   "FMPS" | u32 version | u32 n_entries |
//   per entry: u32 name_len | name | u32 rank | u64 dims[rank] |
//   u64 total_len | f64 values[total_len]
inline constexpr std::uint32_t kParamFormatVersion = 1;

void write_binary(std::ostream &os, const ParamSet &p);
ParamSet read_binary(std::istream &is);
void save_binary(const std::string &path, const ParamSet &p);
ParamSet load_binary(const std::string &path);

nlohmann::json to_json(const ParamSet &p);
ParamSet param_set_from_json(const nlohmann::json &j);

std::string hex64(std::uint64_t v);

} // namespace fedmeta
