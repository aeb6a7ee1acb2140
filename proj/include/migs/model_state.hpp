#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "migs/discriminators.hpp"
#include "migs/errors.hpp"
#include "migs/generators.hpp"
#include "migs/graphnet.hpp"
#include "migs/rng.hpp"
#include "migs/tensor.hpp"

namespace migs {

enum class DecoderKind { crn, spade };

inline std::string decoder_name(DecoderKind k) {
  return k == DecoderKind::crn ? "crn" : "spade";
}

inline DecoderKind parse_decoder(const std::string& s) {
  if (s == "crn") return DecoderKind::crn;
  if (s == "spade") return DecoderKind::spade;
  throw ConfigError("unknown decoder '" + s + "' (expected crn or spade)");
}

// Everything needed to build one model instance: architecture widths plus
// the dataset facts they depend on (vocabulary sizes, image resolution).
struct ModelConfig {
  DecoderKind decoder = DecoderKind::crn;
  int num_objects = 9;
  int num_predicates = 6;
  int image_size = 64;
  GcnConfig gcn;
  CrnConfig crn;
  SpadeConfig spade;
  DGlobalConfig dglobal;
  DObjConfig dobj;

  void validate() const {
    if (num_objects <= 0 || num_predicates <= 0)
      throw ConfigError("ModelConfig: vocabulary must be non-empty");
    if (image_size <= 0 || (image_size & (image_size - 1)) != 0)
      throw ConfigError("ModelConfig: image_size must be a power of two");
    gcn.validate();
    if (decoder == DecoderKind::crn)
      crn.validate();
    else
      spade.validate();
    dglobal.validate();
    dobj.validate();
    if (dobj.num_classes != num_objects)
      throw ConfigError("ModelConfig: dobj.num_classes must match vocabulary");
  }
};

// Full trainable state; only the configured decoder's fields are populated.
template <typename S>
struct ModelParams {
  GcnParamsT<Tensor<S>> gcn;
  CrnParamsT<Tensor<S>> crn;
  CrnState<S> crn_state;
  SpadeParamsT<Tensor<S>> spade;
  SpadeState<S> spade_state;
  DGlobalParamsT<Tensor<S>> dglobal;
  DObjParamsT<Tensor<S>> dobj;
};

template <typename S>
ModelParams<S> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<S> m;
  {
    RngStream rng(derive_seed(seed, "gcn"));
    m.gcn = init_gcn_params<S>(cfg.gcn, cfg.num_objects, cfg.num_predicates,
                               rng);
  }
  {
    RngStream rng(derive_seed(seed, "decoder"));
    if (cfg.decoder == DecoderKind::crn) {
      m.crn = init_crn_params<S>(cfg.crn, cfg.gcn.embed_dim, rng);
      m.crn_state = init_crn_state<S>(cfg.crn);
    } else {
      m.spade = init_spade_params<S>(cfg.spade, cfg.gcn.embed_dim,
                                     cfg.image_size, cfg.image_size, rng);
      m.spade_state = init_spade_state<S>(cfg.spade);
    }
  }
  {
    RngStream rng(derive_seed(seed, "dglobal"));
    m.dglobal = init_dglobal_params<S>(cfg.dglobal, rng);
  }
  {
    RngStream rng(derive_seed(seed, "dobj"));
    m.dobj = init_dobj_params<S>(cfg.dobj, rng);
  }
  return m;
}

// Ordered flat view over every tensor in a model (parameters and batch-norm
// running statistics alike). The order is deterministic, so checkpoints and
// meta-updates can walk two models in lockstep.
template <typename S>
struct TensorRegistry {
  std::vector<std::pair<std::string, Tensor<S>*>> items;

  template <typename Pack>
  void add(const std::string& prefix, Pack& pack) {
    pack.for_each([this, &prefix](const std::string& name, Tensor<S>& t) {
      items.push_back({prefix + name, &t});
    });
  }
};

template <typename S>
TensorRegistry<S> registry(ModelParams<S>& m, const ModelConfig& cfg) {
  TensorRegistry<S> r;
  r.add("gcn.", m.gcn);
  if (cfg.decoder == DecoderKind::crn) {
    r.add("decoder.", m.crn);
    r.add("decoder_state.", m.crn_state);
  } else {
    r.add("decoder.", m.spade);
    r.add("decoder_state.", m.spade_state);
  }
  r.add("dglobal.", m.dglobal);
  r.add("dobj.", m.dobj);
  return r;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
  std::uint64_t config_hash = 0;
  std::uint64_t outer_iteration = 0;
  std::string rng_state;    // empty when the run carries no stream
  std::string config_json;  // verbatim config the run was launched with
};

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'G', 'S',
                                             'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_bytes(std::string& out, const void* p, std::size_t n) {
  out.append(static_cast<const char*>(p), n);
}

template <typename T>
void put_pod(std::string& out, T v) {
  put_bytes(out, &v, sizeof(T));
}

inline void put_str(std::string& out, const std::string& s) {
  put_pod<std::uint64_t>(out, s.size());
  out.append(s);
}

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw IoError("checkpoint truncated");
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, buf.data() + pos, n);
    pos += n;
  }
  template <typename T>
  T pod() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s(buf.data() + pos, n);
    pos += n;
    return s;
  }
};

}  // namespace detail

template <typename S>
std::string encode_checkpoint(ModelParams<S>& model, const ModelConfig& cfg,
                              const CheckpointMeta& meta) {
  std::string out;
  detail::put_bytes(out, kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put_pod<std::uint32_t>(out, kCheckpointVersion);
  detail::put_pod<std::uint64_t>(out, meta.config_hash);
  detail::put_pod<std::uint64_t>(out, meta.outer_iteration);
  detail::put_str(out, meta.rng_state);
  detail::put_str(out, meta.config_json);
  auto reg = registry(model, cfg);
  detail::put_pod<std::uint64_t>(out, reg.items.size());
  for (auto& [name, t] : reg.items) {
    detail::put_str(out, name);
    detail::put_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t->ndim()));
    for (int d = 0; d < t->ndim(); ++d)
      detail::put_pod<std::int32_t>(out, t->dim(d));
    detail::put_bytes(out, t->data(),
                      static_cast<std::size_t>(t->numel()) * sizeof(S));
  }
  return out;
}

// Header only: enough to recover the config and resume point without a model.
inline CheckpointMeta peek_checkpoint_meta(const std::string& blob) {
  detail::ByteReader r{blob};
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("not a MIGS checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError("unsupported checkpoint version " +
                       std::to_string(version));
  CheckpointMeta meta;
  meta.config_hash = r.pod<std::uint64_t>();
  meta.outer_iteration = r.pod<std::uint64_t>();
  meta.rng_state = r.str();
  meta.config_json = r.str();
  return meta;
}

// Fills `model` (already sized by init_model with the matching config) from
// the encoded blob and returns the stored metadata.
template <typename S>
CheckpointMeta decode_checkpoint(const std::string& blob,
                                 ModelParams<S>& model,
                                 const ModelConfig& cfg) {
  detail::ByteReader r{blob};
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("not a MIGS checkpoint");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw VersionError("unsupported checkpoint version " +
                       std::to_string(version));
  CheckpointMeta meta;
  meta.config_hash = r.pod<std::uint64_t>();
  meta.outer_iteration = r.pod<std::uint64_t>();
  meta.rng_state = r.str();
  meta.config_json = r.str();
  auto reg = registry(model, cfg);
  const auto count = r.pod<std::uint64_t>();
  if (count != reg.items.size())
    throw ConfigError("checkpoint holds " + std::to_string(count) +
                      " tensors but the model expects " +
                      std::to_string(reg.items.size()));
  for (auto& [name, t] : reg.items) {
    const std::string stored = r.str();
    if (stored != name)
      throw ConfigError("checkpoint tensor '" + stored +
                        "' does not match model tensor '" + name + "'");
    const auto nd = r.pod<std::uint32_t>();
    std::vector<int> dims(nd);
    for (auto& d : dims) d = r.pod<std::int32_t>();
    if (nd != static_cast<std::uint32_t>(t->ndim()) ||
        !std::equal(dims.begin(), dims.end(), t->shape().begin()))
      throw ConfigError("checkpoint tensor '" + name +
                        "' has a different shape than the model");
    r.bytes(t->data(), static_cast<std::size_t>(t->numel()) * sizeof(S));
  }
  if (r.pos != blob.size()) throw IoError("trailing bytes in checkpoint");
  return meta;
}

std::string read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, const std::string& bytes);

template <typename S>
void save_checkpoint(const std::string& path, ModelParams<S>& model,
                     const ModelConfig& cfg, const CheckpointMeta& meta) {
  write_binary_file(path, encode_checkpoint(model, cfg, meta));
}

template <typename S>
CheckpointMeta load_checkpoint(const std::string& path, ModelParams<S>& model,
                               const ModelConfig& cfg) {
  return decode_checkpoint(read_binary_file(path), model, cfg);
}

inline std::string read_binary_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open '" + path + "' for reading");
  std::string out;
  char buf[65536];
  std::size_t n;
  while ((n = std::fread(buf, 1, sizeof(buf), f)) > 0) out.append(buf, n);
  const bool bad = std::ferror(f) != 0;
  std::fclose(f);
  if (bad) throw IoError("read error on '" + path + "'");
  return out;
}

inline void write_binary_file(const std::string& path,
                              const std::string& bytes) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const std::size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  const bool bad = std::fclose(f) != 0 || n != bytes.size();
  if (bad) throw IoError("write error on '" + path + "'");
}

}  // namespace migs
