#ifndef ASPCNET_CHECKPOINT_HPP
#define ASPCNET_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "aspcnet/dataio.hpp"
#include "aspcnet/model.hpp"

namespace aspcnet {

// Checkpoint file layout (integers little-endian):
//   magic "ASPCKPT1\n"
//   u32 config length, then that many bytes of "key=value\n" lines
//   array records until EOF:
//     u32 name length, name bytes, u8 dtype (f32=1, f64=2), u32 rank,
//     u32 extents[rank], raw little-endian payload

namespace ckpt_detail {

inline void put_u32(std::ostream& f, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                              static_cast<unsigned char>((v >> 8) & 0xFF),
                              static_cast<unsigned char>((v >> 16) & 0xFF),
                              static_cast<unsigned char>((v >> 24) & 0xFF)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& f, const std::string& what) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  if (f.gcount() != 4) throw std::runtime_error("checkpoint: truncated " + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

template <typename S>
void put_scalar_le(std::ostream& f, S v) {
  if constexpr (sizeof(S) == 4) {
    std::uint32_t b;
    std::memcpy(&b, &v, 4);
    const unsigned char raw[4] = {
        static_cast<unsigned char>(b & 0xFF), static_cast<unsigned char>((b >> 8) & 0xFF),
        static_cast<unsigned char>((b >> 16) & 0xFF), static_cast<unsigned char>((b >> 24) & 0xFF)};
    f.write(reinterpret_cast<const char*>(raw), 4);
  } else {
    std::uint64_t b;
    std::memcpy(&b, &v, 8);
    unsigned char raw[8];
    for (int i = 0; i < 8; ++i) raw[i] = static_cast<unsigned char>((b >> (8 * i)) & 0xFF);
    f.write(reinterpret_cast<const char*>(raw), 8);
  }
}

template <typename S>
S get_scalar_le(const unsigned char* p) {
  if constexpr (sizeof(S) == 4) {
    std::uint32_t b = 0;
    for (int i = 0; i < 4; ++i) b |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    S v;
    std::memcpy(&v, &b, 4);
    return v;
  } else {
    std::uint64_t b = 0;
    for (int i = 0; i < 8; ++i) b |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    S v;
    std::memcpy(&v, &b, 8);
    return v;
  }
}

}  // namespace ckpt_detail

struct CheckpointArray {
  int dtype = 1;  // f32=1, f64=2
  Shape shape;
  std::vector<unsigned char> payload;
};

class Checkpoint {
 public:
  std::map<std::string, std::string> config;  // written sorted by key

  template <typename S>
  void put(const std::string& name, const Tensor<S>& t) {
    CheckpointArray a;
    a.dtype = sizeof(S) == 4 ? 1 : 2;
    a.shape = t.shape;
    a.payload.resize(t.size() * sizeof(S));
    std::ostringstream buf;
    for (S v : t.data) ckpt_detail::put_scalar_le(buf, v);
    const std::string s = buf.str();
    std::copy(s.begin(), s.end(), a.payload.begin());
    arrays_.emplace_back(name, std::move(a));
  }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  template <typename S>
  Tensor<S> get(const std::string& name) const {
    const CheckpointArray* a = find(name);
    if (!a) throw std::runtime_error("checkpoint: missing array " + name);
    Tensor<S> out(a->shape);
    if (a->dtype == 1) {
      for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = static_cast<S>(ckpt_detail::get_scalar_le<float>(a->payload.data() + i * 4));
    } else {
      for (std::size_t i = 0; i < out.size(); ++i)
        out.data[i] = static_cast<S>(ckpt_detail::get_scalar_le<double>(a->payload.data() + i * 8));
    }
    return out;
  }

  Shape shape_of(const std::string& name) const {
    const CheckpointArray* a = find(name);
    if (!a) throw std::runtime_error("checkpoint: missing array " + name);
    return a->shape;
  }

  void save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
    f.write("ASPCKPT1\n", 9);
    std::string cfg;
    for (const auto& [k, v] : config) cfg += k + "=" + v + "\n";
    ckpt_detail::put_u32(f, static_cast<std::uint32_t>(cfg.size()));
    f.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
    for (const auto& [name, a] : arrays_) {
      ckpt_detail::put_u32(f, static_cast<std::uint32_t>(name.size()));
      f.write(name.data(), static_cast<std::streamsize>(name.size()));
      const unsigned char dtype = static_cast<unsigned char>(a.dtype);
      f.write(reinterpret_cast<const char*>(&dtype), 1);
      ckpt_detail::put_u32(f, static_cast<std::uint32_t>(a.shape.size()));
      for (int e : a.shape) ckpt_detail::put_u32(f, static_cast<std::uint32_t>(e));
      f.write(reinterpret_cast<const char*>(a.payload.data()),
              static_cast<std::streamsize>(a.payload.size()));
    }
    if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open " + path);
    char magic[9];
    f.read(magic, 9);
    if (f.gcount() != 9 || std::string(magic, 9) != "ASPCKPT1\n")
      throw std::runtime_error("checkpoint: bad magic in " + path);
    Checkpoint c;
    const std::uint32_t cfg_len = ckpt_detail::get_u32(f, "config length");
    std::string cfg(cfg_len, '\0');
    f.read(cfg.data(), cfg_len);
    if (static_cast<std::uint32_t>(f.gcount()) != cfg_len)
      throw std::runtime_error("checkpoint: truncated config block");
    std::size_t pos = 0;
    while (pos < cfg.size()) {
      const std::size_t nl = cfg.find('\n', pos);
      const std::string line = cfg.substr(pos, nl == std::string::npos ? nl : nl - pos);
      pos = nl == std::string::npos ? cfg.size() : nl + 1;
      const std::size_t eq = line.find('=');
      if (eq != std::string::npos) c.config[line.substr(0, eq)] = line.substr(eq + 1);
    }
    for (;;) {
      f.peek();
      if (f.eof()) break;
      const std::uint32_t name_len = ckpt_detail::get_u32(f, "name length");
      std::string name(name_len, '\0');
      f.read(name.data(), name_len);
      if (static_cast<std::uint32_t>(f.gcount()) != name_len)
        throw std::runtime_error("checkpoint: truncated array name");
      CheckpointArray a;
      unsigned char dtype;
      f.read(reinterpret_cast<char*>(&dtype), 1);
      if (f.gcount() != 1 || (dtype != 1 && dtype != 2))
        throw std::runtime_error("checkpoint: bad dtype for " + name);
      a.dtype = dtype;
      const std::uint32_t rank = ckpt_detail::get_u32(f, "rank of " + name);
      std::size_t numel = 1;
      for (std::uint32_t i = 0; i < rank; ++i) {
        const std::uint32_t e = ckpt_detail::get_u32(f, "extent of " + name);
        a.shape.push_back(static_cast<int>(e));
        numel *= e;
      }
      a.payload.resize(numel * (a.dtype == 1 ? 4 : 8));
      f.read(reinterpret_cast<char*>(a.payload.data()),
             static_cast<std::streamsize>(a.payload.size()));
      if (static_cast<std::size_t>(f.gcount()) != a.payload.size())
        throw std::runtime_error("checkpoint: truncated payload of " + name);
      c.arrays_.emplace_back(std::move(name), std::move(a));
    }
    return c;
  }

 private:
  const CheckpointArray* find(const std::string& name) const {
    for (const auto& [n, a] : arrays_)
      if (n == name) return &a;
    return nullptr;
  }

  std::vector<std::pair<std::string, CheckpointArray>> arrays_;
};

// ---------------------------------------------------------------------------
// Model (de)serialization
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> net_config_to_map(const AspcNetConfig& cfg) {
  std::map<std::string, std::string> m;
  auto put_i = [&](const char* k, long long v) { m[k] = std::to_string(v); };
  auto put_d = [&](const char* k, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    m[k] = buf;
  };
  put_i("pca_dims", cfg.pca_dims);
  put_i("patch", cfg.patch);
  put_i("classes", cfg.classes);
  put_i("dilation", cfg.dilation);
  put_i("asp1_filters", cfg.asp1_filters);
  put_i("asp2_filters", cfg.asp2_filters);
  put_i("caps_types", cfg.caps_types);
  put_i("caps_dim", cfg.caps_dim);
  put_i("digital_dim", cfg.digital_dim);
  put_i("routing_iters", cfg.routing_iters);
  put_d("margin_pos", cfg.margin_pos);
  put_d("margin_neg", cfg.margin_neg);
  put_d("margin_lambda", cfg.margin_lambda);
  put_d("lr", cfg.lr);
  put_d("beta1", cfg.beta1);
  put_d("beta2", cfg.beta2);
  put_d("adam_eps", cfg.adam_eps);
  put_i("batch", cfg.batch);
  put_i("epochs", cfg.epochs);
  put_d("bn_momentum", cfg.bn_momentum);
  put_i("seed", static_cast<long long>(cfg.seed));
  put_d("width_scale", cfg.width_scale);
  return m;
}

inline AspcNetConfig net_config_from_map(const std::map<std::string, std::string>& m) {
  AspcNetConfig cfg;
  auto get_i = [&](const char* k, int dflt) {
    auto it = m.find(k);
    return it == m.end() ? dflt : std::stoi(it->second);
  };
  auto get_d = [&](const char* k, double dflt) {
    auto it = m.find(k);
    return it == m.end() ? dflt : std::stod(it->second);
  };
  cfg.pca_dims = get_i("pca_dims", cfg.pca_dims);
  cfg.patch = get_i("patch", cfg.patch);
  cfg.classes = get_i("classes", cfg.classes);
  cfg.dilation = get_i("dilation", cfg.dilation);
  cfg.asp1_filters = get_i("asp1_filters", cfg.asp1_filters);
  cfg.asp2_filters = get_i("asp2_filters", cfg.asp2_filters);
  cfg.caps_types = get_i("caps_types", cfg.caps_types);
  cfg.caps_dim = get_i("caps_dim", cfg.caps_dim);
  cfg.digital_dim = get_i("digital_dim", cfg.digital_dim);
  cfg.routing_iters = get_i("routing_iters", cfg.routing_iters);
  cfg.margin_pos = get_d("margin_pos", cfg.margin_pos);
  cfg.margin_neg = get_d("margin_neg", cfg.margin_neg);
  cfg.margin_lambda = get_d("margin_lambda", cfg.margin_lambda);
  cfg.lr = get_d("lr", cfg.lr);
  cfg.beta1 = get_d("beta1", cfg.beta1);
  cfg.beta2 = get_d("beta2", cfg.beta2);
  cfg.adam_eps = get_d("adam_eps", cfg.adam_eps);
  cfg.batch = get_i("batch", cfg.batch);
  cfg.epochs = get_i("epochs", cfg.epochs);
  cfg.bn_momentum = get_d("bn_momentum", cfg.bn_momentum);
  auto it = m.find("seed");
  if (it != m.end()) cfg.seed = std::stoull(it->second);
  cfg.width_scale = get_d("width_scale", cfg.width_scale);
  return cfg;
}

template <typename S>
Checkpoint make_checkpoint(AspcNet<S>& net, const AdamOptimizer<S>* opt = nullptr,
                           const PcaModel* pca = nullptr,
                           const std::map<std::string, std::string>& extra = {}) {
  Checkpoint c;
  c.config = net_config_to_map(net.cfg);
  for (const auto& [k, v] : extra) c.config[k] = v;
  for (Param<S>* p : net.params()) c.put(p->name, p->value);
  c.put("bn.running_mean", net.bn.running_mean);
  c.put("bn.running_var", net.bn.running_var);
  if (opt) {
    c.config["adam.t"] = std::to_string(opt->t);
    for (Param<S>* p : net.params()) {
      if (!p->adam_m.empty()) {
        c.put("adam.m." + p->name, p->adam_m);
        c.put("adam.v." + p->name, p->adam_v);
      }
    }
  }
  if (pca) {
    c.config["pca.in_bands"] = std::to_string(pca->in_bands);
    c.config["pca.out_bands"] = std::to_string(pca->out_bands);
    auto put_vec = [&](const char* name, const std::vector<double>& v, Shape shape) {
      c.put(name, Tensor<double>(std::move(shape), std::vector<double>(v)));
    };
    put_vec("pca.band_mean", pca->band_mean, {pca->in_bands});
    put_vec("pca.projection", pca->projection, {pca->in_bands, pca->out_bands});
    put_vec("pca.eigenvalues", pca->eigenvalues, {pca->out_bands});
    put_vec("pca.comp_mean", pca->comp_mean, {pca->out_bands});
    put_vec("pca.comp_std", pca->comp_std, {pca->out_bands});
  }
  return c;
}

/// Copies stored arrays into an existing network; a shape mismatch is an
/// error naming the offending parameter.
template <typename S>
void restore_params(AspcNet<S>& net, const Checkpoint& c, AdamOptimizer<S>* opt = nullptr) {
  for (Param<S>* p : net.params()) {
    const Shape stored = c.shape_of(p->name);
    if (stored != p->value.shape)
      throw std::runtime_error("checkpoint: shape mismatch for parameter " + p->name +
                               ": stored " + shape_str(stored) + ", expected " +
                               shape_str(p->value.shape));
    p->value = c.get<S>(p->name);
  }
  net.bn.running_mean = c.get<S>("bn.running_mean");
  net.bn.running_var = c.get<S>("bn.running_var");
  if (opt) {
    auto it = c.config.find("adam.t");
    if (it != c.config.end()) {
      opt->t = std::stoll(it->second);
      for (Param<S>* p : net.params()) {
        if (c.has("adam.m." + p->name)) {
          p->adam_m = c.get<S>("adam.m." + p->name);
          p->adam_v = c.get<S>("adam.v." + p->name);
        }
      }
    }
  }
}

inline PcaModel pca_from_checkpoint(const Checkpoint& c) {
  PcaModel m;
  m.in_bands = std::stoi(c.config.at("pca.in_bands"));
  m.out_bands = std::stoi(c.config.at("pca.out_bands"));
  m.band_mean = c.get<double>("pca.band_mean").data;
  m.projection = c.get<double>("pca.projection").data;
  m.eigenvalues = c.get<double>("pca.eigenvalues").data;
  m.comp_mean = c.get<double>("pca.comp_mean").data;
  m.comp_std = c.get<double>("pca.comp_std").data;
  return m;
}

template <typename S>
void save_network(AspcNet<S>& net, const std::string& path, const AdamOptimizer<S>* opt = nullptr,
                  const PcaModel* pca = nullptr,
                  const std::map<std::string, std::string>& extra = {}) {
  make_checkpoint(net, opt, pca, extra).save(path);
}

template <typename S>
AspcNet<S> load_network(const std::string& path, AdamOptimizer<S>* opt = nullptr,
                        PcaModel* pca = nullptr,
                        std::map<std::string, std::string>* config_out = nullptr) {
  Checkpoint c = Checkpoint::load(path);
  AspcNetConfig cfg = net_config_from_map(c.config);
  AspcNet<S> net = build_network<S>(cfg);
  if (opt) {
    opt->lr = cfg.lr;
    opt->beta1 = cfg.beta1;
    opt->beta2 = cfg.beta2;
    opt->eps = cfg.adam_eps;
  }
  restore_params(net, c, opt);
  if (pca && c.config.count("pca.in_bands")) *pca = pca_from_checkpoint(c);
  if (config_out) *config_out = c.config;
  return net;
}

}  // namespace aspcnet

#endif  // ASPCNET_CHECKPOINT_HPP
