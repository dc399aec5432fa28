#include "fedmeta/param_set.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "fedmeta/errors.hpp"

namespace fedmeta {

void Layout::add(std::string name, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (auto d : shape)
    n *= d;
  entries_.push_back({std::move(name), std::move(shape), total_, n});
  total_ += n;
}

const LayoutEntry &Layout::find(const std::string &name) const {
  for (const auto &e : entries_)
    if (e.name == name)
      return e;
  throw LayoutError("no tensor named '" + name + "' in layout");
}

ParamSet::ParamSet(std::shared_ptr<const Layout> layout, double fill)
    : layout_(std::move(layout)), values_(layout_->total_len(), fill) {}

ParamSet::ParamSet(std::shared_ptr<const Layout> layout,
                   std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  if (values_.size() != layout_->total_len())
    throw LayoutError("value count " + std::to_string(values_.size()) +
                      " does not match layout length " +
                      std::to_string(layout_->total_len()));
}

std::span<const double> ParamSet::tensor(std::size_t entry) const {
  const auto &e = layout_->at(entry);
  return {values_.data() + e.offset, e.size};
}

std::span<double> ParamSet::tensor(std::size_t entry) {
  const auto &e = layout_->at(entry);
  return {values_.data() + e.offset, e.size};
}

std::span<const double> ParamSet::tensor(const std::string &name) const {
  const auto &e = layout_->find(name);
  return {values_.data() + e.offset, e.size};
}

bool ParamSet::same_layout(const ParamSet &o) const {
  if (layout_ == o.layout_)
    return true;
  if (!layout_ || !o.layout_)
    return false;
  return *layout_ == *o.layout_;
}

void ParamSet::require_same_layout(const ParamSet &o, const char *op) const {
  if (!same_layout(o))
    throw LayoutError(std::string(op) + ": parameter layouts differ");
}

bool ParamSet::all_finite() const {
  // x - x is 0 for finite x and NaN otherwise; the sum vectorizes.
  double acc = 0.0;
  for (double v : values_)
    acc += v - v;
  return acc == 0.0;
}

std::uint64_t ParamSet::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : values_) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffU;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

ParamSet &ParamSet::operator+=(const ParamSet &o) {
  require_same_layout(o, "operator+=");
  for (std::size_t i = 0; i < values_.size(); ++i)
    values_[i] += o.values_[i];
  return *this;
}

ParamSet &ParamSet::operator-=(const ParamSet &o) {
  require_same_layout(o, "operator-=");
  for (std::size_t i = 0; i < values_.size(); ++i)
    values_[i] -= o.values_[i];
  return *this;
}

ParamSet &ParamSet::operator*=(double s) {
  for (auto &v : values_)
    v *= s;
  return *this;
}

ParamSet &ParamSet::axpy(double s, const ParamSet &o) {
  require_same_layout(o, "axpy");
  for (std::size_t i = 0; i < values_.size(); ++i)
    values_[i] += s * o.values_[i];
  return *this;
}

ParamSet operator+(ParamSet a, const ParamSet &b) { return a += b; }
ParamSet operator-(ParamSet a, const ParamSet &b) { return a -= b; }
ParamSet operator*(double s, ParamSet a) { return a *= s; }

ParamSet weighted_sum(std::span<const ParamSet> models,
                      std::span<const double> weights) {
  if (models.empty())
    throw std::invalid_argument("weighted_sum: empty model list");
  if (models.size() != weights.size())
    throw std::invalid_argument("weighted_sum: model/weight count mismatch");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0))
      throw std::invalid_argument("weighted_sum: negative or NaN weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw std::invalid_argument("weighted_sum: weights sum to " +
                                std::to_string(total) + ", expected 1");
  for (const auto &m : models)
    models.front().require_same_layout(m, "weighted_sum");

  ParamSet out(models.front().layout_ptr(), 0.0);
  for (std::size_t k = 0; k < models.size(); ++k)
    out.axpy(weights[k], models[k]);
  return out;
}

namespace {

template <typename T> void put_le(std::ostream &os, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i)
    buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char *>(buf), sizeof(T));
}

template <typename T> T get_le(std::istream &is) {
  unsigned char buf[sizeof(T)];
  if (!is.read(reinterpret_cast<char *>(buf), sizeof(T)))
    throw std::runtime_error("param file truncated");
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

constexpr char kMagic[4] = {'F', 'M', 'P', 'S'};

} // namespace

void write_binary(std::ostream &os, const ParamSet &p) {
  os.write(kMagic, 4);
  put_le<std::uint32_t>(os, kParamFormatVersion);
  const auto &entries = p.layout().entries();
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto &e : entries) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape)
      put_le<std::uint64_t>(os, d);
  }
  put_le<std::uint64_t>(os, p.size());
  for (double v : p.values())
    put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
}

ParamSet read_binary(std::istream &is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a parameter file (bad magic)");
  auto version = get_le<std::uint32_t>(is);
  if (version != kParamFormatVersion)
    throw std::runtime_error("unsupported parameter file version " +
                             std::to_string(version));
  auto layout = std::make_shared<Layout>();
  auto n_entries = get_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    auto len = get_le<std::uint32_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len))
      throw std::runtime_error("param file truncated");
    auto rank = get_le<std::uint32_t>(is);
    std::vector<std::size_t> shape(rank);
    for (auto &d : shape)
      d = get_le<std::uint64_t>(is);
    layout->add(std::move(name), std::move(shape));
  }
  auto total = get_le<std::uint64_t>(is);
  if (total != layout->total_len())
    throw LayoutError("param file: value count disagrees with layout table");
  std::vector<double> values(total);
  for (auto &v : values)
    v = std::bit_cast<double>(get_le<std::uint64_t>(is));
  return ParamSet(std::move(layout), std::move(values));
}

void save_binary(const std::string &path, const ParamSet &p) {
  std::ofstream os(path, std::ios::binary);
  if (!os)
    throw std::runtime_error("cannot open " + path + " for writing");
  write_binary(os, p);
}

ParamSet load_binary(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw std::runtime_error("cannot open " + path);
  return read_binary(is);
}

nlohmann::json to_json(const ParamSet &p) {
  nlohmann::json layout = nlohmann::json::array();
  for (const auto &e : p.layout().entries())
    layout.push_back({{"name", e.name}, {"shape", e.shape}});
  return {{"version", kParamFormatVersion},
          {"layout", layout},
          {"values", std::vector<double>(p.values().begin(), p.values().end())}};
}

ParamSet param_set_from_json(const nlohmann::json &j) {
  if (j.at("version").get<std::uint32_t>() != kParamFormatVersion)
    throw std::runtime_error("unsupported parameter JSON version");
  auto layout = std::make_shared<Layout>();
  for (const auto &e : j.at("layout"))
    layout->add(e.at("name").get<std::string>(),
                e.at("shape").get<std::vector<std::size_t>>());
  return ParamSet(std::move(layout), j.at("values").get<std::vector<double>>());
}

std::string hex64(std::uint64_t v) {
  static const char *digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4)
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

} // namespace fedmeta
