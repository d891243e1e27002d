#include "vqmoe/checkpoint.hpp"

#include "vqmoe/io.hpp"
#include "vqmoe/config.hpp"
#include "vqmoe/quantizer.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

namespace vqmoe {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint wire format assumes a little-endian host");

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::runtime_error(op + ": " + msg);
}

void put_u32(std::string& out, uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

void put_u64(std::string& out, uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.append(buf, 8);
}

void put_doubles(std::string& out, const std::vector<double>& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

void put_str(std::string& out, const std::string& s) {
  put_u64(out, s.size());
  out.append(s);
}

struct Reader {
  const std::string& bytes;
  size_t pos = 0;

  void need(size_t n, const std::string& what) {
    if (pos + n > bytes.size())
      fail("load_checkpoint", "unexpected end of file reading " + what);
  }
  uint32_t u32(const std::string& what) {
    need(4, what);
    uint32_t v = 0;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }
  uint64_t u64(const std::string& what) {
    need(8, what);
    uint64_t v = 0;
    std::memcpy(&v, bytes.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str(const std::string& what) {
    const uint64_t n = u64(what + " length");
    need(static_cast<size_t>(n), what);
    std::string s = bytes.substr(pos, static_cast<size_t>(n));
    pos += static_cast<size_t>(n);
    return s;
  }
  void doubles(std::vector<double>& dst, size_t n, const std::string& what) {
    need(n * sizeof(double), what);
    dst.resize(n);
    std::memcpy(dst.data(), bytes.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const TrainState& st) {
  std::string out;
  out.append("VQMO");
  put_u32(out, kCheckpointVersion);

  const std::string cfg_text = canonical_model_section(st.cfg);
  put_u64(out, config_digest(st.cfg));
  put_str(out, cfg_text);

  put_u64(out, static_cast<uint64_t>(st.step));
  out.push_back(st.codebook_ready ? '\x01' : '\x00');
  out.push_back(st.finetune_mode ? '\x01' : '\x00');
  put_u64(out, static_cast<uint64_t>(st.n_classes));
  put_u64(out, st.finetune_mode ? static_cast<uint64_t>(st.fc1_W.dim(1)) : 0);
  put_str(out, st.rng.state());

  put_u64(out, st.params.size());
  for (size_t i = 0; i < st.params.size(); ++i) {
    const Param& p = st.params[i];
    const AdamSlot& slot = st.adam[i];
    const size_t n = p.tensor.data().size();
    if (slot.m.size() != n || slot.v.size() != n)
      fail("save_checkpoint", "adam slot size mismatch on '" + p.name + "'");
    put_u32(out, static_cast<uint32_t>(p.name.size()));
    out.append(p.name);
    put_u32(out, static_cast<uint32_t>(p.tensor.rank()));
    for (int64_t a = 0; a < p.tensor.rank(); ++a)
      put_u64(out, static_cast<uint64_t>(p.tensor.dim(a)));
    put_doubles(out, p.tensor.data());
    put_u64(out, static_cast<uint64_t>(slot.t));
    put_doubles(out, slot.m);
    put_doubles(out, slot.v);
  }

  if (st.cfg.variant == VariantKind::vqmoe) {
    put_u64(out, st.blocks.size());
    for (const Block& b : st.blocks) put_str(out, serialize_codebook(b.router.codebook));
  } else {
    put_u64(out, 0);
  }

  atomic_write_text(path, out);
}

TrainState load_checkpoint(const std::string& path) {
  const std::string bytes = read_text_file(path);
  Reader r{bytes};

  r.need(4, "magic");
  if (bytes.compare(0, 4, "VQMO") != 0)
    fail("load_checkpoint", "'" + path + "' is not a vqmoe checkpoint (bad magic)");
  r.pos = 4;
  const uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    fail("load_checkpoint", "unsupported checkpoint version " + std::to_string(version));

  const uint64_t digest = r.u64("config digest");
  const std::string cfg_text = r.str("config text");
  ModelConfig cfg = model_config_from_canonical(cfg_text);
  if (config_digest(cfg) != digest)
    fail("load_checkpoint", "config digest mismatch (corrupt checkpoint)");

  const uint64_t step = r.u64("step");
  r.need(2, "flags");
  const bool codebook_ready = bytes[r.pos++] != '\x00';
  const bool finetune_mode = bytes[r.pos++] != '\x00';
  const uint64_t n_classes = r.u64("n_classes");
  const uint64_t classifier_hidden = r.u64("classifier hidden");
  const std::string rng_state = r.str("rng state");

  TrainState st = build_model(cfg);
  if (finetune_mode)
    attach_classifier(st, static_cast<int64_t>(n_classes),
                      static_cast<int64_t>(classifier_hidden));

  const uint64_t n_params = r.u64("parameter count");
  if (n_params != st.params.size())
    fail("load_checkpoint", "checkpoint has " + std::to_string(n_params) +
                                " parameters, the rebuilt model has " +
                                std::to_string(st.params.size()));
  for (size_t i = 0; i < st.params.size(); ++i) {
    Param& p = st.params[i];
    const uint32_t name_len = r.u32("parameter name length");
    r.need(name_len, "parameter name");
    const std::string name = bytes.substr(r.pos, name_len);
    r.pos += name_len;
    if (name != p.name)
      fail("load_checkpoint", "parameter " + std::to_string(i) + " is '" + name +
                                  "', expected '" + p.name + "'");
    const uint32_t rank = r.u32("parameter rank");
    if (rank != static_cast<uint32_t>(p.tensor.rank()))
      fail("load_checkpoint", "'" + name + "' rank mismatch");
    for (uint32_t a = 0; a < rank; ++a) {
      const uint64_t dim = r.u64("parameter dim");
      if (dim != static_cast<uint64_t>(p.tensor.dim(a)))
        fail("load_checkpoint", "'" + name + "' shape mismatch on axis " +
                                    std::to_string(a));
    }
    r.doubles(p.tensor.data(), p.tensor.data().size(), "'" + name + "' payload");
    AdamSlot& slot = st.adam[i];
    slot.t = static_cast<int64_t>(r.u64("adam t"));
    r.doubles(slot.m, p.tensor.data().size(), "'" + name + "' adam m");
    r.doubles(slot.v, p.tensor.data().size(), "'" + name + "' adam v");
  }

  const uint64_t n_codebooks = r.u64("codebook count");
  const uint64_t expected =
      cfg.variant == VariantKind::vqmoe ? st.blocks.size() : 0;
  if (n_codebooks != expected)
    fail("load_checkpoint", "checkpoint carries " + std::to_string(n_codebooks) +
                                " codebooks, expected " + std::to_string(expected));
  for (uint64_t i = 0; i < n_codebooks; ++i) {
    const std::string blob = r.str("codebook blob");
    // one source of truth: the parameter table already filled the vectors,
    // the dedicated blob must agree bit for bit
    if (blob != serialize_codebook(st.blocks[static_cast<size_t>(i)].router.codebook))
      fail("load_checkpoint", "codebook " + std::to_string(i) +
                                  " disagrees with the parameter table (corrupt "
                                  "checkpoint)");
  }
  if (r.pos != bytes.size())
    fail("load_checkpoint", std::to_string(bytes.size() - r.pos) +
                                " trailing bytes after the checkpoint payload");

  st.step = static_cast<int64_t>(step);
  st.codebook_ready = codebook_ready;
  st.rng.set_state(rng_state);
  return st;
}

}  // namespace vqmoe
