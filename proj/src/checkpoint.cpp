#include "dpnet/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <map>
#include <set>

#include "dpnet/image_io.hpp"

namespace dpnet {
namespace {

constexpr char kMagic[4] = {'D', 'P', 'N', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr size_t kMaxNameLen = 4096;
constexpr size_t kMaxElems = 1u << 30;

void put_u32(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

void put_f32(std::string& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  put_u32(out, v);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  explicit Reader(const std::string& b) : buf(b) {}
  void need(size_t n) const {
    if (pos + n > buf.size()) throw DataError("checkpoint truncated");
  }
  std::uint32_t u32() {
    need(4);
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 4;
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) |
           (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  }
  float f32() {
    const std::uint32_t v = u32();
    float f;
    std::memcpy(&f, &v, 4);
    return f;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

struct Entry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

void put_entry(std::string& out, const std::string& name, const Shape& shape,
               const std::vector<double>& values) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (size_t e : shape) put_u32(out, static_cast<std::uint32_t>(e));
  for (double v : values) put_f32(out, static_cast<float>(v));
}

std::vector<ParamRef> model_tensors(const Model& m) {
  auto refs = m.params_all();
  auto bufs = m.bn_buffers();
  refs.insert(refs.end(), bufs.begin(), bufs.end());
  return refs;
}

bool in_scope(const std::string& name, LoadScope scope) {
  if (scope == LoadScope::All) return true;
  return name.rfind("shared.", 0) == 0 || name.rfind("enh.", 0) == 0;
}

std::vector<double> rng_chunks(const std::array<std::uint64_t, 4>& st) {
  std::vector<double> out;
  out.reserve(16);
  for (std::uint64_t w : st)
    for (int k = 0; k < 4; ++k)
      out.push_back(static_cast<double>((w >> (16 * k)) & 0xFFFFu));
  return out;
}

std::array<std::uint64_t, 4> rng_from_chunks(const std::vector<float>& v) {
  std::array<std::uint64_t, 4> st{};
  for (int w = 0; w < 4; ++w)
    for (int k = 0; k < 4; ++k) {
      const double c = v[static_cast<size_t>(w * 4 + k)];
      if (c < 0 || c > 65535 || c != std::floor(c))
        throw DataError("checkpoint entry 'state.rng' holds invalid chunks");
      st[static_cast<size_t>(w)] |= static_cast<std::uint64_t>(c) << (16 * k);
    }
  return st;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& m,
                     const AdamState* adam, const TrainProgress* progress,
                     const std::array<unsigned char, 32>& config_digest) {
  const auto tensors = model_tensors(m);
  const auto params = m.params_all();

  std::uint32_t count = static_cast<std::uint32_t>(tensors.size());
  if (adam) count += static_cast<std::uint32_t>(2 * params.size());
  if (progress) count += 3;

  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  out.append(reinterpret_cast<const char*>(config_digest.data()), 32);
  put_u32(out, count);

  for (const auto& r : tensors) put_entry(out, r.name, r.t.shape(), r.t.values());
  if (adam) {
    for (const auto& p : params) {
      auto it = adam->slots.find(p.name);
      const std::vector<double> zeros(p.t.values().size(), 0.0);
      const std::vector<double>& mv =
          it != adam->slots.end() ? it->second.m.values() : zeros;
      const std::vector<double>& vv =
          it != adam->slots.end() ? it->second.v.values() : zeros;
      put_entry(out, "adam.m." + p.name, p.t.shape(), mv);
      put_entry(out, "adam.v." + p.name, p.t.shape(), vv);
    }
  }
  if (progress) {
    put_entry(out, "state.step", {1},
              {static_cast<double>(progress->step)});
    put_entry(out, "state.epoch", {1},
              {static_cast<double>(progress->epoch)});
    put_entry(out, "state.rng", {16}, rng_chunks(progress->rng_state));
  }
  atomic_write(path, out);
}

LoadReport load_checkpoint(const std::string& path, Model& m, AdamState* adam,
                           const std::array<unsigned char, 32>& config_digest,
                           bool require_digest_match, LoadScope scope) {
  const std::string blob = read_file_bytes(path);
  Reader rd(blob);
  if (rd.bytes(4) != std::string(kMagic, 4))
    throw DataError("not a checkpoint file (bad magic): " + path);
  const std::uint32_t version = rd.u32();
  if (version != kVersion)
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version));
  const std::string stored_digest = rd.bytes(32);

  LoadReport rep;
  rep.digest_match =
      std::memcmp(stored_digest.data(), config_digest.data(), 32) == 0;
  if (require_digest_match && !rep.digest_match)
    throw ConfigError(
        "checkpoint was written with a different configuration (config "
        "digest mismatch): " +
        path);

  const std::uint32_t count = rd.u32();
  std::vector<Entry> entries;
  entries.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    const std::uint32_t nlen = rd.u32();
    if (nlen == 0 || nlen > kMaxNameLen)
      throw DataError("checkpoint entry has invalid name length");
    e.name = rd.bytes(nlen);
    const std::uint32_t rank = rd.u32();
    if (rank > 8) throw DataError("checkpoint entry '" + e.name +
                                  "' has invalid rank");
    size_t n = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const std::uint32_t ext = rd.u32();
      e.shape.push_back(ext);
      n *= ext;
      if (n > kMaxElems)
        throw DataError("checkpoint entry '" + e.name + "' is too large");
    }
    e.values.resize(n);
    for (size_t k = 0; k < n; ++k) e.values[k] = rd.f32();
    entries.push_back(std::move(e));
  }
  if (rd.pos != blob.size())
    throw DataError("checkpoint has trailing bytes after last entry");

  // Registry of every legitimate entry name for this model.
  const auto tensors = model_tensors(m);
  const auto params = m.params_all();
  std::map<std::string, Tensor> targets;
  std::map<std::string, Shape> param_shapes;
  for (const auto& r : tensors) targets.emplace(r.name, r.t);
  for (const auto& p : params) param_shapes.emplace(p.name, p.t.shape());

  std::set<std::string> seen;
  std::set<std::string> applied;
  size_t adam_applied = 0;
  bool saw_step = false, saw_epoch = false, saw_rng = false;

  for (const auto& e : entries) {
    if (!seen.insert(e.name).second)
      throw DataError("checkpoint has duplicate entry '" + e.name + "'");

    if (e.name == "state.step" || e.name == "state.epoch") {
      if (e.shape != Shape{1})
        throw DataError("checkpoint entry '" + e.name + "' has wrong shape");
      const double v = e.values[0];
      if (v < 0 || v != std::floor(v))
        throw DataError("checkpoint entry '" + e.name + "' is not a counter");
      if (e.name == "state.step") {
        rep.progress.step = static_cast<std::uint64_t>(v);
        saw_step = true;
      } else {
        rep.progress.epoch = static_cast<std::uint64_t>(v);
        saw_epoch = true;
      }
      continue;
    }
    if (e.name == "state.rng") {
      if (e.shape != Shape{16})
        throw DataError("checkpoint entry 'state.rng' has wrong shape");
      rep.progress.rng_state = rng_from_chunks(e.values);
      saw_rng = true;
      continue;
    }

    const bool is_m = e.name.rfind("adam.m.", 0) == 0;
    const bool is_v = e.name.rfind("adam.v.", 0) == 0;
    if (is_m || is_v) {
      const std::string pname = e.name.substr(7);
      auto it = param_shapes.find(pname);
      if (it == param_shapes.end())
        throw DataError("checkpoint has moments for unknown parameter '" +
                        pname + "'");
      if (!adam || scope != LoadScope::All) {
        rep.skipped.push_back(e.name);
        continue;
      }
      if (e.shape != it->second)
        throw DataError("checkpoint entry '" + e.name +
                        "' has mismatched shape");
      auto& slot = adam->slots[pname];
      Tensor& dst = is_m ? slot.m : slot.v;
      dst = Tensor::zeros(it->second);
      auto& dv = dst.values_mut();
      for (size_t k = 0; k < dv.size(); ++k) dv[k] = e.values[k];
      ++adam_applied;
      continue;
    }

    auto it = targets.find(e.name);
    if (it == targets.end())
      throw DataError("checkpoint has unknown entry '" + e.name + "'");
    if (!in_scope(e.name, scope)) {
      rep.skipped.push_back(e.name);
      continue;
    }
    if (e.shape != it->second.shape())
      throw DataError("checkpoint entry '" + e.name +
                      "' has mismatched shape");
    auto& dv = it->second.values_mut();
    for (size_t k = 0; k < dv.size(); ++k) dv[k] = e.values[k];
    applied.insert(e.name);
  }

  for (const auto& r : tensors) {
    if (in_scope(r.name, scope) && !applied.count(r.name))
      throw DataError("checkpoint is missing parameter '" + r.name + "'");
  }
  if (adam && scope == LoadScope::All && adam_applied > 0 &&
      adam_applied != 2 * params.size())
    throw DataError("checkpoint holds an incomplete optimizer state");
  rep.has_optimizer = adam_applied == 2 * params.size() && adam_applied > 0;
  if (saw_step != saw_epoch || saw_step != saw_rng)
    throw DataError("checkpoint holds incomplete training progress");
  rep.has_progress = saw_step;

  // Fix any slot whose pair was only half-initialized (cannot happen when
  // counts match, but keep the invariant explicit).
  if (adam) {
    for (auto& kv : adam->slots) {
      auto it = param_shapes.find(kv.first);
      if (it == param_shapes.end()) continue;
      if (!kv.second.m.defined()) kv.second.m = Tensor::zeros(it->second);
      if (!kv.second.v.defined()) kv.second.v = Tensor::zeros(it->second);
    }
  }
  return rep;
}

void quantize_state_f32(Model& m, AdamState* adam) {
  auto squash = [](Tensor t) {
    for (double& v : t.values_mut()) v = static_cast<double>(static_cast<float>(v));
  };
  for (auto& r : model_tensors(m)) squash(r.t);
  if (adam) {
    for (auto& kv : adam->slots) {
      squash(kv.second.m);
      squash(kv.second.v);
    }
  }
}

}  // namespace dpnet
