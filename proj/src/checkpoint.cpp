#include "bbed/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace bbed {
namespace {

enum class DType : std::uint8_t { f32 = 0, packed = 1, i64 = 2 };

struct Entry {
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::vector<float> f32;
  std::vector<std::uint64_t> words;
  std::vector<std::int64_t> i64;
};

enum LayerTag : std::int64_t { conv = 0, bn = 1, act = 2, maxpool = 3, skip_save = 4, skip_add = 5, gap = 6, lin = 7 };
constexpr std::size_t kLayerSlots = 8;

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  std::vector<std::uint8_t>& data() { return out_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

void put_name(Writer& w, const std::string& name) {
  w.u32(static_cast<std::uint32_t>(name.size()));
  w.bytes(name.data(), name.size());
}

void put_dims(Writer& w, const std::vector<std::uint64_t>& dims) {
  w.u32(static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) w.u64(d);
}

struct Encoder {
  Writer w;
  std::uint32_t count = 0;

  void f32(const std::string& name, const Tensor& t) {
    std::vector<std::uint64_t> dims(t.shape().begin(), t.shape().end());
    f32(name, dims, t.data());
  }
  void f32(const std::string& name, const std::vector<std::uint64_t>& dims, std::span<const float> v) {
    put_name(w, name);
    w.u8(static_cast<std::uint8_t>(DType::f32));
    put_dims(w, dims);
    for (float x : v) w.u32(std::bit_cast<std::uint32_t>(x));
    ++count;
  }
  void packed(const std::string& name, const PackedBits& b) {
    put_name(w, name);
    w.u8(static_cast<std::uint8_t>(DType::packed));
    put_dims(w, {b.n});
    for (auto word : b.words) w.u64(word);
    ++count;
  }
  void i64(const std::string& name, const std::vector<std::uint64_t>& dims, const std::vector<std::int64_t>& v) {
    put_name(w, name);
    w.u8(static_cast<std::uint8_t>(DType::i64));
    put_dims(w, dims);
    for (auto x : v) w.u64(static_cast<std::uint64_t>(x));
    ++count;
  }
};

std::string layer_name(std::size_t i, const char* field) { return "layer" + std::to_string(i) + "." + field; }

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  bool has(std::size_t n) const { return n <= b_.size() - pos_; }
  std::uint64_t le(int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string str(std::size_t n) {
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  std::size_t size() const { return b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

struct Decoded {
  std::map<std::string, Entry> entries;

  const Entry& get(const std::string& name, DType dtype) const {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    if (it->second.dtype != dtype) throw CheckpointError("tensor '" + name + "' has the wrong dtype");
    return it->second;
  }
  bool contains(const std::string& name) const { return entries.count(name) != 0; }
  Tensor tensor(const std::string& name) const {
    const Entry& e = get(name, DType::f32);
    Shape s(e.dims.begin(), e.dims.end());
    return Tensor(std::move(s), e.f32);
  }
};

Tensor expect_shape(Tensor t, const Shape& shape, const std::string& name) {
  if (t.shape() != shape) {
    throw CheckpointError("tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " + shape_str(shape));
  }
  return t;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Model& model) {
  Encoder e;
  if (!model.layers.empty()) {
    std::vector<std::int64_t> meta{static_cast<std::int64_t>(model.num_classes)};
    for (auto d : model.input_shape) meta.push_back(static_cast<std::int64_t>(d));
    e.i64("meta.model", {meta.size()}, meta);
    const auto& c = model.compression;
    e.i64("meta.compression", {5},
          {static_cast<std::int64_t>(c.kind), static_cast<std::int64_t>(c.scheme), static_cast<std::int64_t>(c.num_bases),
           static_cast<std::int64_t>(c.regularity), static_cast<std::int64_t>(c.teacher)});
    const float cf[3] = {c.sparsity, c.temperature, c.mix};
    e.f32("meta.compression_values", {3}, cf);

    std::vector<std::int64_t> desc;
    for (const auto& layer : model.layers) {
      std::int64_t slot[kLayerSlots] = {};
      std::visit(
          [&](const auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, ConvLayer>) {
              const std::int64_t s[kLayerSlots] = {conv,
                                                   l.stride,
                                                   l.padding,
                                                   l.binarize_input,
                                                   static_cast<std::int64_t>(l.scheme),
                                                   static_cast<std::int64_t>(l.num_bases),
                                                   static_cast<std::int64_t>(l.shifts),
                                                   static_cast<std::int64_t>(l.bases.size())};
              std::copy(s, s + kLayerSlots, slot);
            } else if constexpr (std::is_same_v<T, BatchNormLayer>) {
              slot[0] = bn;
            } else if constexpr (std::is_same_v<T, ActLayer>) {
              slot[0] = act;
              slot[1] = static_cast<std::int64_t>(l.kind);
            } else if constexpr (std::is_same_v<T, MaxPoolLayer>) {
              slot[0] = maxpool;
              slot[1] = l.kernel;
              slot[2] = l.stride;
            } else if constexpr (std::is_same_v<T, SkipSaveLayer>) {
              slot[0] = skip_save;
            } else if constexpr (std::is_same_v<T, SkipAddLayer>) {
              slot[0] = skip_add;
            } else if constexpr (std::is_same_v<T, GapLayer>) {
              slot[0] = gap;
            } else {
              slot[0] = lin;
            }
          },
          layer);
      desc.insert(desc.end(), slot, slot + kLayerSlots);
    }
    e.i64("meta.layers", {model.layers.size(), kLayerSlots}, desc);

    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      const auto& layer = model.layers[i];
      if (const auto* c = std::get_if<ConvLayer>(&layer)) {
        e.f32(layer_name(i, "weight"), c->weight);
        if (c->mask.defined()) e.f32(layer_name(i, "mask"), c->mask);
        for (std::size_t m = 0; m < c->bases.size(); ++m) {
          e.packed("layer" + std::to_string(i) + ".basis" + std::to_string(m), c->bases[m]);
        }
        if (!c->bases.empty()) e.f32(layer_name(i, "alpha"), {c->alpha.size()}, c->alpha);
      } else if (const auto* b = std::get_if<BatchNormLayer>(&layer)) {
        e.f32(layer_name(i, "gamma"), b->gamma);
        e.f32(layer_name(i, "beta"), b->beta);
        e.f32(layer_name(i, "running_mean"), b->running_mean);
        e.f32(layer_name(i, "running_var"), b->running_var);
        const float p[2] = {b->epsilon, b->momentum};
        e.f32(layer_name(i, "params"), {2}, p);
      } else if (const auto* l = std::get_if<LinearLayer>(&layer)) {
        e.f32(layer_name(i, "weight"), l->weight);
        if (l->bias.defined()) e.f32(layer_name(i, "bias"), l->bias);
      }
    }
  }

  Writer header;
  header.bytes("BBED", 4);
  header.u32(kCheckpointVersion);
  header.u32(e.count);
  header.u8(static_cast<std::uint8_t>(model.arch));
  auto out = std::move(header.data());
  out.insert(out.end(), e.w.data().begin(), e.w.data().end());
  return out;
}

Model decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (!r.has(kCheckpointHeaderBytes)) throw CheckpointError("checkpoint header truncated");
  if (r.str(4) != "BBED") throw CheckpointError("not a checkpoint: bad magic");
  const auto version = static_cast<std::uint32_t>(r.le(4));
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = static_cast<std::uint32_t>(r.le(4));
  const auto arch_id = static_cast<std::uint8_t>(r.le(1));
  if (arch_id > static_cast<std::uint8_t>(Arch::resnet_mini)) {
    throw CheckpointError("unknown architecture id " + std::to_string(arch_id));
  }

  Decoded d;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string where = "tensor #" + std::to_string(t);
    if (!r.has(4)) throw CheckpointError(where + ": truncated name length");
    const auto name_len = static_cast<std::size_t>(r.le(4));
    if (!r.has(name_len)) throw CheckpointError(where + ": truncated name");
    const std::string name = r.str(name_len);
    auto fail = [&](const std::string& what) { throw CheckpointError("tensor '" + name + "': " + what); };
    if (d.contains(name)) fail("duplicate name");
    if (!r.has(5)) fail("truncated header");
    Entry e;
    const auto dtype = static_cast<std::uint8_t>(r.le(1));
    if (dtype > 2) fail("unknown dtype " + std::to_string(dtype));
    e.dtype = static_cast<DType>(dtype);
    const auto rank = static_cast<std::uint32_t>(r.le(4));
    if (rank > 8) fail("implausible rank " + std::to_string(rank));
    if (!r.has(8ULL * rank)) fail("truncated dims");
    std::uint64_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.dims.push_back(r.le(8));
      if (e.dims.back() != 0 && numel > (std::uint64_t{1} << 40) / e.dims.back()) fail("implausible size");
      numel *= e.dims.back();
    }
    switch (e.dtype) {
      case DType::f32:
        if (!r.has(4 * numel)) fail("truncated payload");
        e.f32.resize(numel);
        for (auto& v : e.f32) v = std::bit_cast<float>(static_cast<std::uint32_t>(r.le(4)));
        break;
      case DType::packed: {
        if (rank != 1) fail("packed tensors must have rank 1");
        const auto nwords = words_for(numel);
        if (!r.has(8 * nwords)) fail("truncated payload");
        e.words.resize(nwords);
        for (auto& w : e.words) w = r.le(8);
        break;
      }
      case DType::i64:
        if (!r.has(8 * numel)) fail("truncated payload");
        e.i64.resize(numel);
        for (auto& v : e.i64) v = static_cast<std::int64_t>(r.le(8));
        break;
    }
    d.entries.emplace(name, std::move(e));
  }
  if (r.pos() != r.size()) throw CheckpointError("checkpoint has " + std::to_string(r.size() - r.pos()) + " trailing bytes");

  Model m;
  m.arch = static_cast<Arch>(arch_id);
  if (count == 0) return m;

  const auto& meta = d.get("meta.model", DType::i64).i64;
  if (meta.size() != 4 || meta[0] < 0) throw CheckpointError("tensor 'meta.model': malformed");
  m.num_classes = static_cast<std::size_t>(meta[0]);
  m.input_shape = {static_cast<std::size_t>(meta[1]), static_cast<std::size_t>(meta[2]), static_cast<std::size_t>(meta[3])};
  const auto& comp = d.get("meta.compression", DType::i64).i64;
  const auto& compv = d.get("meta.compression_values", DType::f32).f32;
  if (comp.size() != 5 || compv.size() != 3) throw CheckpointError("tensor 'meta.compression': malformed");
  m.compression.kind = static_cast<CompressionKind>(comp[0]);
  m.compression.scheme = static_cast<BinaryScheme>(comp[1]);
  m.compression.num_bases = static_cast<std::size_t>(comp[2]);
  m.compression.regularity = static_cast<Regularity>(comp[3]);
  m.compression.teacher = static_cast<Arch>(comp[4]);
  m.compression.sparsity = compv[0];
  m.compression.temperature = compv[1];
  m.compression.mix = compv[2];

  const Entry& layers = d.get("meta.layers", DType::i64);
  if (layers.dims.size() != 2 || layers.dims[1] != kLayerSlots) throw CheckpointError("tensor 'meta.layers': malformed");
  for (std::size_t i = 0; i < layers.dims[0]; ++i) {
    const std::int64_t* s = layers.i64.data() + i * kLayerSlots;
    switch (s[0]) {
      case conv: {
        ConvLayer c;
        const auto wname = layer_name(i, "weight");
        c.weight = d.tensor(wname);
        if (c.weight.rank() != 4) throw CheckpointError("tensor '" + wname + "' must have rank 4");
        c.stride = static_cast<int>(s[1]);
        c.padding = static_cast<int>(s[2]);
        c.binarize_input = s[3] != 0;
        c.scheme = static_cast<BinaryScheme>(s[4]);
        c.num_bases = static_cast<std::size_t>(s[5]);
        c.shifts = static_cast<ShiftRule>(s[6]);
        if (d.contains(layer_name(i, "mask"))) {
          c.mask = expect_shape(d.tensor(layer_name(i, "mask")), c.weight.shape(), layer_name(i, "mask"));
        }
        for (std::int64_t b = 0; b < s[7]; ++b) {
          const auto bname = "layer" + std::to_string(i) + ".basis" + std::to_string(b);
          const Entry& be = d.get(bname, DType::packed);
          if (be.dims[0] != c.weight.numel()) throw CheckpointError("tensor '" + bname + "' does not match the weights");
          c.bases.push_back(PackedBits{static_cast<std::size_t>(be.dims[0]), be.words});
        }
        if (s[7] > 0) {
          const auto aname = layer_name(i, "alpha");
          c.alpha = d.get(aname, DType::f32).f32;
          if (c.alpha.size() != c.bases.size() * c.weight.dim(0)) throw CheckpointError("tensor '" + aname + "' has the wrong size");
        }
        m.layers.emplace_back(std::move(c));
        break;
      }
      case bn: {
        BatchNormLayer b;
        b.gamma = d.tensor(layer_name(i, "gamma"));
        const Shape ch = b.gamma.shape();
        b.beta = expect_shape(d.tensor(layer_name(i, "beta")), ch, layer_name(i, "beta"));
        b.running_mean = expect_shape(d.tensor(layer_name(i, "running_mean")), ch, layer_name(i, "running_mean"));
        b.running_var = expect_shape(d.tensor(layer_name(i, "running_var")), ch, layer_name(i, "running_var"));
        const auto& p = d.get(layer_name(i, "params"), DType::f32).f32;
        if (p.size() != 2) throw CheckpointError("tensor '" + layer_name(i, "params") + "' has the wrong size");
        b.epsilon = p[0];
        b.momentum = p[1];
        m.layers.emplace_back(std::move(b));
        break;
      }
      case act: m.layers.emplace_back(ActLayer{static_cast<ActKind>(s[1])}); break;
      case maxpool: m.layers.emplace_back(MaxPoolLayer{static_cast<int>(s[1]), static_cast<int>(s[2])}); break;
      case skip_save: m.layers.emplace_back(SkipSaveLayer{}); break;
      case skip_add: m.layers.emplace_back(SkipAddLayer{}); break;
      case gap: m.layers.emplace_back(GapLayer{}); break;
      case lin: {
        LinearLayer l;
        l.weight = d.tensor(layer_name(i, "weight"));
        if (l.weight.rank() != 2) throw CheckpointError("tensor '" + layer_name(i, "weight") + "' must have rank 2");
        if (d.contains(layer_name(i, "bias"))) {
          l.bias = expect_shape(d.tensor(layer_name(i, "bias")), {l.weight.dim(0)}, layer_name(i, "bias"));
        }
        m.layers.emplace_back(std::move(l));
        break;
      }
      default: throw CheckpointError("tensor 'meta.layers': unknown layer tag " + std::to_string(s[0]));
    }
  }
  return m;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(model);
  auto tmp = path;
  tmp += ".tmp";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw CheckpointError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace bbed
