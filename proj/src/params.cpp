#include "gtgm/params.hpp"

#include "gtgm/error.hpp"
#include "gtgm/rng.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>

namespace gtgm {

ParamBlock::ParamBlock(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
    const std::size_t count = std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    value.assign(count, 0.0);
    grad.assign(count, 0.0);
}

void ParamBlock::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

void zero_grads(const ParamRefs& params) {
    for (auto* p : params) p->zero_grad();
}

double grad_norm(const ParamRefs& params) {
    double s = 0.0;
    for (const auto* p : params)
        for (double g : p->grad) s += g * g;
    return std::sqrt(s);
}

std::size_t parameter_count(const ParamRefs& params) {
    std::size_t n = 0;
    for (const auto* p : params) n += p->size();
    return n;
}

void init_uniform_fan_in(ParamBlock& p, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    for (double& v : p.value) v = rng.uniform(-bound, bound);
}

const ParamBlock* Checkpoint::find(const std::string& name) const {
    for (const auto& b : blocks)
        if (b.name == name) return &b;
    return nullptr;
}

const ParamBlock& Checkpoint::at(const std::string& name) const {
    const auto* b = find(name);
    require(b != nullptr, ErrorKind::format, "checkpoint has no block '" + name + "'");
    return *b;
}

namespace {

constexpr char kMagic[8] = {'G', 'T', 'G', 'M', 'C', 'K', 'P', 'T'};

void put_uint(std::string& out, std::uint64_t v, int bytes) {
    for (int b = 0; b < bytes; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xffu));
}

class Reader {
public:
    explicit Reader(const std::string& s) : s_(s) {}

    std::uint64_t uint(int bytes) {
        need(static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int b = 0; b < bytes; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + b])) << (8 * b);
        pos_ += static_cast<std::size_t>(bytes);
        return v;
    }

    std::string bytes(std::size_t n) {
        need(n);
        std::string out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    bool done() const noexcept { return pos_ == s_.size(); }

private:
    void need(std::size_t n) const {
        require(pos_ + n <= s_.size(), ErrorKind::format,
                "checkpoint truncated: need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) + ", file has " +
                    std::to_string(s_.size()));
    }

    const std::string& s_;
    std::size_t pos_ = 0;
};

} // namespace

std::string encode_checkpoint(const Checkpoint& c) {
    std::string out(kMagic, 8);
    put_uint(out, kCheckpointVersion, 4);
    const std::string meta = c.metadata.dump();
    put_uint(out, meta.size(), 4);
    out += meta;
    put_uint(out, c.blocks.size(), 4);
    for (const auto& b : c.blocks) {
        put_uint(out, b.name.size(), 4);
        out += b.name;
        put_uint(out, b.shape.size(), 4);
        for (auto d : b.shape) put_uint(out, d, 8);
        for (double v : b.value) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_uint(out, bits, 8);
        }
    }
    return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    require(r.bytes(8) == std::string(kMagic, 8), ErrorKind::format, "not a checkpoint (bad magic)");
    const auto version = r.uint(4);
    require(version == kCheckpointVersion, ErrorKind::format, "unsupported checkpoint version " + std::to_string(version));
    Checkpoint c;
    const auto meta_len = r.uint(4);
    try {
        c.metadata = nlohmann::json::parse(r.bytes(meta_len));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("checkpoint metadata is not JSON: ") + e.what());
    }
    const auto n_blocks = r.uint(4);
    for (std::uint64_t i = 0; i < n_blocks; ++i) {
        ParamBlock b;
        b.name = r.bytes(r.uint(4));
        const auto ndim = r.uint(4);
        std::size_t count = 1;
        for (std::uint64_t k = 0; k < ndim; ++k) {
            b.shape.push_back(r.uint(8));
            count *= b.shape.back();
        }
        b.value.resize(count);
        for (double& v : b.value) {
            const std::uint64_t bits = r.uint(8);
            std::memcpy(&v, &bits, 8);
        }
        c.blocks.push_back(std::move(b));
    }
    require(r.done(), ErrorKind::format, "trailing bytes after checkpoint blocks");
    return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string bytes = encode_checkpoint(c);
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorKind::io, "cannot open " + tmp + " for writing");
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        require(out.good(), ErrorKind::io, "short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::io, "cannot open checkpoint " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

void load_blocks(const Checkpoint& c, const ParamRefs& params) {
    for (auto* p : params) {
        const auto& b = c.at(p->name);
        require(b.shape == p->shape, ErrorKind::dimension, "checkpoint block '" + p->name + "' has a different shape");
        p->value = b.value;
    }
}

void append_blocks(Checkpoint& c, const ParamRefs& params) {
    for (const auto* p : params) {
        ParamBlock b(p->name, p->shape);
        b.value = p->value;
        b.grad.clear();
        c.blocks.push_back(std::move(b));
    }
}

} // namespace gtgm
