#include "sisda/optimizer.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "sisda/error.hpp"

namespace sisda {

Adam::Adam(AdamConfig config) : config_(config) {
  if (!(config_.lr > 0.0)) throw Error(ErrorKind::invalid_config, "learning rate must be > 0");
  if (config_.beta1 < 0.0 || config_.beta1 >= 1.0 || config_.beta2 < 0.0 || config_.beta2 >= 1.0) {
    throw Error(ErrorKind::invalid_config, "Adam betas must be in [0,1)");
  }
}

double global_norm(const std::map<std::string, Tensor>& grads) {
  double s = 0.0;
  for (const auto& [name, g] : grads) {
    for (double x : g.values()) s += x * x;
  }
  return std::sqrt(s);
}

void Adam::step(std::map<std::string, Tensor>& params, const std::map<std::string, Tensor>& grads) {
  ++t_;
  double clip = 1.0;
  if (config_.grad_clip > 0.0) {
    const double n = global_norm(grads);
    if (n > config_.grad_clip) clip = config_.grad_clip / n;
  }
  const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw Error(ErrorKind::invalid_argument, "Adam: gradient for unknown parameter " + name);
    Tensor& p = it->second;
    if (g.shape() != p.shape()) {
      throw Error(ErrorKind::shape_mismatch, "Adam: " + name + " is " + shape_string(p.shape()) +
                                                 " but gradient is " + shape_string(g.shape()));
    }
    auto [mi, fresh_m] = m_.try_emplace(name, Tensor::zeros(p.shape()));
    auto [vi, fresh_v] = v_.try_emplace(name, Tensor::zeros(p.shape()));
    Tensor& m = mi->second;
    Tensor& v = vi->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      p[i] -= config_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config_.eps);
    }
  }
}

namespace {

static_assert(std::endian::native == std::endian::little, "optimizer state files are little-endian");

constexpr char kMagic[8] = {'S', 'I', 'S', 'D', 'A', 'O', 'P', 'T'};

template <typename T>
void put(std::ofstream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) {
    throw Error(ErrorKind::parse, "truncated optimizer state " + path.string());
  }
  return value;
}

void put_map(std::ofstream& out, const std::map<std::string, Tensor>& m) {
  put<std::uint64_t>(out, m.size());
  for (const auto& [name, t] : m) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.values().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
}

std::map<std::string, Tensor> get_map(std::ifstream& in, const std::filesystem::path& path) {
  std::map<std::string, Tensor> m;
  const auto count = get<std::uint64_t>(in, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error(ErrorKind::parse, "truncated optimizer state " + path.string());
    std::vector<std::size_t> shape(get<std::uint32_t>(in, path));
    std::size_t n = 1;
    for (auto& d : shape) {
      d = get<std::uint64_t>(in, path);
      n *= d;
    }
    std::vector<double> values(n);
    if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double)))) {
      throw Error(ErrorKind::parse, "truncated optimizer state " + path.string());
    }
    m.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return m;
}

}  // namespace

void Adam::save(const std::filesystem::path& path, std::uint64_t extra) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write optimizer state " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint64_t>(out, t_);
  put<std::uint64_t>(out, extra);
  for (double x : {config_.lr, config_.beta1, config_.beta2, config_.eps, config_.grad_clip}) put<double>(out, x);
  put_map(out, m_);
  put_map(out, v_);
  if (!out) throw Error(ErrorKind::io, "failed writing optimizer state " + path.string());
}

Adam Adam::load(const std::filesystem::path& path, std::uint64_t* extra) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open optimizer state " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorKind::parse, "not an optimizer state file: " + path.string());
  }
  const auto t = get<std::uint64_t>(in, path);
  const auto x = get<std::uint64_t>(in, path);
  AdamConfig c;
  c.lr = get<double>(in, path);
  c.beta1 = get<double>(in, path);
  c.beta2 = get<double>(in, path);
  c.eps = get<double>(in, path);
  c.grad_clip = get<double>(in, path);
  Adam a(c);
  a.t_ = t;
  a.m_ = get_map(in, path);
  a.v_ = get_map(in, path);
  if (extra) *extra = x;
  return a;
}

}  // namespace sisda
