#include "fedtabgan/weights.hpp"

#include "fedtabgan/errors.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace fedtabgan::federation {

namespace {

constexpr std::uint64_t kMaxValues = 1ULL << 28;
constexpr char kModelMagic[8] = {'F', 'T', 'G', 'M', 'O', 'D', 'E', 'L'};
constexpr std::uint16_t kModelVersion = 1;

class Writer {
public:
    void u16(std::uint16_t v) { le(v, 2); }
    void u32(std::uint32_t v) { le(v, 4); }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void bytes(std::span<const std::uint8_t> b) { out_.insert(out_.end(), b.begin(), b.end()); }
    void text(std::string_view s) {
        out_.insert(out_.end(), reinterpret_cast<const std::uint8_t*>(s.data()),
                    reinterpret_cast<const std::uint8_t*>(s.data()) + s.size());
    }
    std::vector<std::uint8_t>& data() { return out_; }

private:
    void le(std::uint64_t v, int n) {
        for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = data_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return data_.size() - pos_; }
    std::size_t position() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (remaining() < n) throw IntegrityError("truncated data: need " + std::to_string(n) + " more bytes");
    }
    std::uint64_t le(int n) {
        need(static_cast<std::size_t>(n));
        std::uint64_t v = 0;
        for (int i = 0; i < n; ++i) v |= std::uint64_t{data_[pos_ + static_cast<std::size_t>(i)]} << (8 * i);
        pos_ += static_cast<std::size_t>(n);
        return v;
    }
    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

void append_network(const nn::Network& net, WeightsBundle& bundle) {
    for (const auto& p : net.params()) {
        bundle.layout.push_back({static_cast<std::uint32_t>(p.weights.rows()), static_cast<std::uint32_t>(p.weights.cols())});
        for (Eigen::Index i = 0; i < p.weights.size(); ++i) bundle.values.push_back(static_cast<float>(p.weights.data()[i]));
        bundle.layout.push_back({static_cast<std::uint32_t>(p.biases.size()), 1});
        for (Eigen::Index i = 0; i < p.biases.size(); ++i) bundle.values.push_back(static_cast<float>(p.biases[i]));
    }
}

std::size_t install_network(nn::Network& net, const WeightsBundle& bundle, std::size_t offset) {
    for (auto& p : net.mutable_params()) {
        for (Eigen::Index i = 0; i < p.weights.size(); ++i) p.weights.data()[i] = bundle.values[offset++];
        for (Eigen::Index i = 0; i < p.biases.size(); ++i) p.biases[i] = bundle.values[offset++];
    }
    return offset;
}

void append_layout(const std::vector<nn::LayerSpec>& specs, std::vector<TensorShape>& layout) {
    for (const auto& s : specs) {
        layout.push_back({static_cast<std::uint32_t>(s.output_dim), static_cast<std::uint32_t>(s.input_dim)});
        layout.push_back({static_cast<std::uint32_t>(s.output_dim), 1});
    }
}

std::vector<std::uint8_t> encode_body(const WeightsBundle& bundle) {
    if (bundle.layout.size() > 0xFFFF) throw IntegrityError("too many tensors for a weights bundle");
    std::uint64_t total = 0;
    for (const auto& s : bundle.layout) total += s.size();
    if (total != bundle.values.size())
        throw IntegrityError("layout describes " + std::to_string(total) + " values but bundle holds " +
                             std::to_string(bundle.values.size()));
    Writer w;
    w.data().reserve(2 + 8 * bundle.layout.size() + 4 * bundle.values.size() + 4);
    w.u16(static_cast<std::uint16_t>(bundle.layout.size()));
    for (const auto& s : bundle.layout) {
        w.u32(s.rows);
        w.u32(s.cols);
    }
    for (float v : bundle.values) w.f32(v);
    return std::move(w.data());
}

}  // namespace

std::uint32_t crc32(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    std::size_t pos = 0;
    while (pos < bytes.size()) {
        const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
        crc = ::crc32(crc, bytes.data() + pos, chunk);
        pos += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<TensorShape> expected_layout(const gan::GanConfig& config) {
    std::vector<TensorShape> layout;
    append_layout(gan::generator_specs(config), layout);
    append_layout(gan::discriminator_specs(config), layout);
    return layout;
}

WeightsBundle extract_weights(const gan::GanModel& model) {
    WeightsBundle bundle;
    bundle.values.reserve(model.generator.parameter_count() + model.discriminator.parameter_count());
    append_network(model.generator, bundle);
    append_network(model.discriminator, bundle);
    bundle.checksum = crc32(encode_body(bundle));
    return bundle;
}

void load_weights(gan::GanModel& model, const WeightsBundle& bundle) {
    const auto layout = expected_layout(model.config);
    if (bundle.layout != layout) throw IntegrityError("weights bundle layout does not match the model architecture");
    std::uint64_t total = 0;
    for (const auto& s : layout) total += s.size();
    if (bundle.values.size() != total) throw IntegrityError("weights bundle value count does not match its layout");
    const std::size_t used = install_network(model.generator, bundle, 0);
    install_network(model.discriminator, bundle, used);
}

void round_weights_to_f32(gan::GanModel& model) {
    for (auto* net : {&model.generator, &model.discriminator})
        for (auto& p : net->mutable_params()) {
            p.weights = p.weights.cast<float>().cast<double>();
            p.biases = p.biases.cast<float>().cast<double>();
        }
}

std::vector<std::uint8_t> encode_weights(const WeightsBundle& bundle) {
    auto body = encode_body(bundle);
    const std::uint32_t crc = crc32(body);
    for (int i = 0; i < 4; ++i) body.push_back(static_cast<std::uint8_t>(crc >> (8 * i)));
    return body;
}

WeightsBundle decode_weights(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 6) throw IntegrityError("weights bundle too short");
    const auto body = bytes.first(bytes.size() - 4);
    Reader tail(bytes.last(4));
    const std::uint32_t stored = tail.u32();
    const std::uint32_t actual = crc32(body);
    if (stored != actual) throw IntegrityError("weights bundle checksum mismatch");

    Reader r(body);
    WeightsBundle bundle;
    const std::uint16_t count = r.u16();
    std::uint64_t total = 0;
    bundle.layout.reserve(count);
    for (std::uint16_t i = 0; i < count; ++i) {
        TensorShape s;
        s.rows = r.u32();
        s.cols = r.u32();
        total += s.size();
        if (total > kMaxValues) throw IntegrityError("weights bundle declares too many values");
        bundle.layout.push_back(s);
    }
    if (r.remaining() != total * 4)
        throw IntegrityError("weights bundle holds " + std::to_string(r.remaining()) + " value bytes, layout needs " +
                             std::to_string(total * 4));
    const auto raw = r.take(static_cast<std::size_t>(total * 4));
    bundle.values.resize(static_cast<std::size_t>(total));
    for (std::size_t i = 0; i < bundle.values.size(); ++i) {
        std::uint32_t v = 0;
        for (int b = 0; b < 4; ++b) v |= std::uint32_t{raw[i * 4 + static_cast<std::size_t>(b)]} << (8 * b);
        bundle.values[i] = std::bit_cast<float>(v);
    }
    bundle.checksum = stored;
    return bundle;
}

bool same_values(const WeightsBundle& a, const WeightsBundle& b) {
    return a.layout == b.layout && a.values.size() == b.values.size() &&
           std::memcmp(a.values.data(), b.values.data(), a.values.size() * sizeof(float)) == 0;
}

ModelFile make_model_file(const gan::GanModel& model, std::vector<std::string> labels) {
    return {model.config, gan::digest(model.config), std::move(labels), extract_weights(model)};
}

std::vector<std::uint8_t> encode_model_file(const ModelFile& file) {
    Writer w;
    w.bytes({reinterpret_cast<const std::uint8_t*>(kModelMagic), sizeof kModelMagic});
    w.u16(kModelVersion);
    w.bytes(file.digest);
    const std::string config_text = gan::to_text(file.config);
    w.u32(static_cast<std::uint32_t>(config_text.size()));
    w.text(config_text);
    w.u32(static_cast<std::uint32_t>(file.labels.size()));
    for (const auto& label : file.labels) {
        if (label.size() > 0xFFFF) throw UsageError("feature label too long");
        w.u16(static_cast<std::uint16_t>(label.size()));
        w.text(label);
    }
    const auto weights = encode_weights(file.weights);
    w.u32(static_cast<std::uint32_t>(weights.size()));
    w.bytes(weights);
    const std::uint32_t crc = crc32(w.data());
    w.u32(crc);
    return std::move(w.data());
}

ModelFile decode_model_file(std::span<const std::uint8_t> bytes, bool verify_digest) {
    if (bytes.size() < sizeof kModelMagic + 6 || std::memcmp(bytes.data(), kModelMagic, sizeof kModelMagic) != 0)
        throw IntegrityError("not a model file (bad magic)");
    Reader tail(bytes.last(4));
    if (tail.u32() != crc32(bytes.first(bytes.size() - 4))) throw IntegrityError("model file checksum mismatch");

    Reader r(bytes.first(bytes.size() - 4));
    r.take(sizeof kModelMagic);
    if (const auto version = r.u16(); version != kModelVersion)
        throw IntegrityError("unsupported model file version " + std::to_string(version));
    ModelFile file;
    const auto digest = r.take(file.digest.size());
    std::copy(digest.begin(), digest.end(), file.digest.begin());
    const auto text_len = r.u32();
    const auto text = r.take(text_len);
    file.config = gan::config_from_key_values(
        parse_key_values({reinterpret_cast<const char*>(text.data()), text.size()}));
    if (verify_digest && gan::digest(file.config) != file.digest)
        throw IntegrityError("model file config digest mismatch");
    const auto label_count = r.u32();
    if (label_count > r.remaining()) throw IntegrityError("model file label count is implausible");
    file.labels.reserve(label_count);
    for (std::uint32_t i = 0; i < label_count; ++i) {
        const auto len = r.u16();
        const auto s = r.take(len);
        file.labels.emplace_back(reinterpret_cast<const char*>(s.data()), s.size());
    }
    const auto weights_len = r.u32();
    file.weights = decode_weights(r.take(weights_len));
    if (r.remaining() != 0) throw IntegrityError("trailing bytes in model file");
    if (file.weights.layout != expected_layout(file.config))
        throw IntegrityError("model file weights do not match its configuration");
    return file;
}

void save_model(const std::filesystem::path& path, const ModelFile& file) {
    const auto bytes = encode_model_file(file);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + path.string() + "'");
}

ModelFile load_model(const std::filesystem::path& path, bool verify_digest) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model file '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_model_file(bytes, verify_digest);
}

gan::GanModel model_from_file(const ModelFile& file) {
    auto model = gan::build_gan(file.config);
    load_weights(model, file.weights);
    return model;
}

}  // namespace fedtabgan::federation
