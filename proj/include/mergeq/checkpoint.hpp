#pragma once

// Binary checkpoint container.
//
//   magic        8 bytes  "MERGEQCK"
//   version      u16
//   source_hash  u64      FNV-1a of the source checkpoint file (0 for a source model)
//   count        u32      number of records
//   records:
//     name       u32 length + UTF-8 bytes
//     kind       u8       0 = float (f64 payload), 1 = int (i32 payload)
//     bits       u8       0 for unquantized tensors
//     step       f64      0 for unquantized tensors
//     shape      u32 rank + rank * u32 dims (rank 0 holds one element)
//     payload    product(dims) little-endian values
//
// Layer k is stored as "layers.k.weight", "layers.k.bias" and, when the layer input
// is quantized, "layers.k.act_in" (a rank-0 float record whose value is its step).
// Every layer but the last uses relu.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"
#include "nnet.hpp"
#include "qmodel.hpp"
#include "quant.hpp"
#include "rng.hpp"

namespace mergeq {

inline constexpr char kCheckpointMagic[8] = {'M', 'E', 'R', 'G', 'E', 'Q', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class RecordKind : std::uint8_t { float64 = 0, int32 = 1 };

struct TensorRecord {
    std::string name;
    RecordKind kind = RecordKind::float64;
    std::uint8_t bits = 0;
    double step = 0.0;
    std::vector<std::uint32_t> shape;
    std::vector<double> floats;
    std::vector<std::int32_t> ints;

    std::size_t numel() const {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

struct CheckpointFile {
    std::uint16_t version = kCheckpointVersion;
    std::uint64_t source_hash = 0;
    std::vector<TensorRecord> records;

    const TensorRecord* find(std::string_view name) const {
        for (const auto& r : records)
            if (r.name == name) return &r;
        return nullptr;
    }
};

namespace detail {

class ByteWriter {
public:
    template <class T>
    void put(T v) {
        static_assert(std::is_integral_v<T>);
        for (std::size_t i = 0; i < sizeof(T); ++i)
            out_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
    }
    void put_f64(double v) { put(std::bit_cast<std::uint64_t>(v)); }
    void put_bytes(std::string_view s) { out_.append(s); }
    std::string take() { return std::move(out_); }

private:
    std::string out_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view in) : in_(in) {}

    template <class T>
    T get() {
        static_assert(std::is_integral_v<T>);
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }
    double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
    std::string_view get_bytes(std::size_t n) {
        need(n);
        auto s = in_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw FormatError("checkpoint truncated");
    }
    std::string_view in_;
    std::size_t pos_ = 0;
};

inline std::vector<std::uint32_t> to_u32_shape(const Shape& s) {
    std::vector<std::uint32_t> out;
    for (auto d : s) out.push_back(static_cast<std::uint32_t>(d));
    return out;
}

inline Shape to_shape(const std::vector<std::uint32_t>& s) { return Shape(s.begin(), s.end()); }

inline std::string layer_key(std::size_t k, const char* what) { return "layers." + std::to_string(k) + "." + what; }

} // namespace detail

inline std::string serialize(const CheckpointFile& f) {
    detail::ByteWriter w;
    w.put_bytes(std::string_view(kCheckpointMagic, 8));
    w.put(f.version);
    w.put(f.source_hash);
    w.put(static_cast<std::uint32_t>(f.records.size()));
    for (const auto& r : f.records) {
        if (r.numel() != (r.kind == RecordKind::int32 ? r.ints.size() : r.floats.size()))
            throw DimensionError("checkpoint record '" + r.name + "': payload does not match shape");
        w.put(static_cast<std::uint32_t>(r.name.size()));
        w.put_bytes(r.name);
        w.put(static_cast<std::uint8_t>(r.kind));
        w.put(r.bits);
        w.put_f64(r.step);
        w.put(static_cast<std::uint32_t>(r.shape.size()));
        for (auto d : r.shape) w.put(d);
        if (r.kind == RecordKind::int32)
            for (auto v : r.ints) w.put(static_cast<std::uint32_t>(v));
        else
            for (auto v : r.floats) w.put_f64(v);
    }
    return w.take();
}

inline CheckpointFile deserialize(std::string_view bytes) {
    detail::ByteReader r(bytes);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
        throw FormatError("not a checkpoint (bad magic)");
    r.get_bytes(8);
    CheckpointFile f;
    f.version = r.get<std::uint16_t>();
    if (f.version != kCheckpointVersion)
        throw FormatError("checkpoint version mismatch: file has " + std::to_string(f.version) + ", expected " +
                          std::to_string(kCheckpointVersion));
    f.source_hash = r.get<std::uint64_t>();
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        TensorRecord rec;
        rec.name = std::string(r.get_bytes(r.get<std::uint32_t>()));
        const auto kind = r.get<std::uint8_t>();
        if (kind > 1) throw FormatError("record '" + rec.name + "': unknown kind " + std::to_string(kind));
        rec.kind = static_cast<RecordKind>(kind);
        rec.bits = r.get<std::uint8_t>();
        rec.step = r.get_f64();
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t d = 0; d < rank; ++d) rec.shape.push_back(r.get<std::uint32_t>());
        const std::size_t n = rec.numel();
        if (rec.kind == RecordKind::int32) {
            if (rec.bits < 2 || rec.bits > 8) throw FormatError("record '" + rec.name + "': bad bit width");
            const std::int32_t lo = -(1 << (rec.bits - 1)), hi = (1 << (rec.bits - 1)) - 1;
            for (std::size_t e = 0; e < n; ++e) {
                const auto v = static_cast<std::int32_t>(r.get<std::uint32_t>());
                if (v < lo || v > hi) throw FormatError("record '" + rec.name + "': integer outside bit range");
                rec.ints.push_back(v);
            }
        } else {
            for (std::size_t e = 0; e < n; ++e) rec.floats.push_back(r.get_f64());
        }
        f.records.push_back(std::move(rec));
    }
    if (!r.done()) throw FormatError("trailing bytes after checkpoint records");
    return f;
}

inline std::uint64_t content_hash(std::string_view bytes) {
    Fnv1a64 h;
    h.update(bytes);
    return h.digest();
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// Writes to a sibling temporary file and renames it over `path`.
inline void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write to '" + tmp.string() + "' failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

inline CheckpointFile to_checkpoint_file(const Network& net, std::uint64_t source_hash = 0) {
    net.validate();
    CheckpointFile f;
    f.source_hash = source_hash;
    for (std::size_t k = 0; k < net.layers.size(); ++k) {
        const auto& l = net.layers[k];
        f.records.push_back({detail::layer_key(k, "weight"), RecordKind::float64, 0, 0.0,
                             detail::to_u32_shape(l.weight.shape()), l.weight.values(), {}});
        f.records.push_back({detail::layer_key(k, "bias"), RecordKind::float64, 0, 0.0,
                             detail::to_u32_shape(l.bias.shape()), l.bias.values(), {}});
    }
    return f;
}

inline CheckpointFile to_checkpoint_file(const QuantizedCheckpoint& q) {
    q.validate();
    CheckpointFile f;
    f.source_hash = q.source_hash;
    for (std::size_t k = 0; k < q.layers.size(); ++k) {
        const auto& l = q.layers[k];
        f.records.push_back({detail::layer_key(k, "weight"), RecordKind::int32,
                             static_cast<std::uint8_t>(l.weight.scheme.bits), l.weight.scheme.step,
                             detail::to_u32_shape(l.weight.shape), {}, l.weight.ints});
        f.records.push_back({detail::layer_key(k, "bias"), RecordKind::float64, 0, 0.0,
                             detail::to_u32_shape(l.bias.shape()), l.bias.values(), {}});
        if (l.act_in)
            f.records.push_back({detail::layer_key(k, "act_in"), RecordKind::float64,
                                 static_cast<std::uint8_t>(l.act_in->bits), l.act_in->step, {}, {l.act_in->step}, {}});
    }
    return f;
}

inline std::size_t layer_count(const CheckpointFile& f) {
    std::size_t k = 0;
    while (f.find(detail::layer_key(k, "weight"))) ++k;
    if (k == 0) throw FormatError("checkpoint holds no layers");
    return k;
}

inline bool is_quantized(const CheckpointFile& f) {
    const auto* w = f.find(detail::layer_key(0, "weight"));
    return w && w->kind == RecordKind::int32;
}

namespace detail {

inline const TensorRecord& require_record(const CheckpointFile& f, const std::string& name) {
    const auto* r = f.find(name);
    if (!r) throw FormatError("checkpoint is missing record '" + name + "'");
    return *r;
}

inline Tensor float_tensor(const TensorRecord& r) {
    if (r.kind != RecordKind::float64) throw FormatError("record '" + r.name + "' is not a float tensor");
    return Tensor(to_shape(r.shape), r.floats);
}

} // namespace detail

inline QuantizedCheckpoint to_quantized(const CheckpointFile& f) {
    const std::size_t L = layer_count(f);
    QuantizedCheckpoint q;
    q.source_hash = f.source_hash;
    for (std::size_t k = 0; k < L; ++k) {
        const auto& w = detail::require_record(f, detail::layer_key(k, "weight"));
        if (w.kind != RecordKind::int32) throw FormatError("record '" + w.name + "' is not quantized");
        QuantizedLayer layer;
        layer.weight = {detail::to_shape(w.shape), w.ints, QuantScheme{w.bits, w.step, QuantTarget::weight}};
        layer.bias = detail::float_tensor(detail::require_record(f, detail::layer_key(k, "bias")));
        layer.activation = k + 1 == L ? Activation::identity : Activation::relu;
        if (const auto* a = f.find(detail::layer_key(k, "act_in"))) {
            if (a->floats.size() != 1 || a->floats[0] != a->step)
                throw FormatError("record '" + a->name + "' is malformed");
            layer.act_in = QuantScheme{a->bits, a->step, QuantTarget::activation};
        }
        q.layers.push_back(std::move(layer));
    }
    q.validate();
    dequantize(q); // shape chaining check
    return q;
}

// Float view of any checkpoint; quantized weights are dequantized.
inline Network to_network(const CheckpointFile& f) {
    if (is_quantized(f)) return dequantize(to_quantized(f));
    const std::size_t L = layer_count(f);
    Network net;
    for (std::size_t k = 0; k < L; ++k) {
        net.layers.push_back({detail::float_tensor(detail::require_record(f, detail::layer_key(k, "weight"))),
                              detail::float_tensor(detail::require_record(f, detail::layer_key(k, "bias"))),
                              k + 1 == L ? Activation::identity : Activation::relu});
    }
    net.validate();
    return net;
}

inline CheckpointFile load_checkpoint(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointFile& f) {
    write_file_atomic(path, serialize(f));
}

} // namespace mergeq
