#include "lsskd/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

namespace lsskd {

namespace {

constexpr char kMagic[4] = {'L', 'S', 'S', 'K'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_f64(std::vector<std::uint8_t>& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

struct Reader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;
    void need(std::size_t n) const {
        if (pos + n > bytes.size()) throw ConfigError("checkpoint file truncated");
    }
    std::uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes[pos++]) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes[pos++]) << (8 * i);
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
    std::vector<std::uint8_t> blob(std::size_t n) {
        need(n);
        std::vector<std::uint8_t> b(bytes.begin() + pos, bytes.begin() + pos + n);
        pos += n;
        return b;
    }
};

std::size_t dtype_bytes(DType dt) { return dt == DType::f32 ? 4 : 8; }

bool starts_with(const std::string& s, const char* prefix) {
    return s.rfind(prefix, 0) == 0;
}

bool is_running_stat(const std::string& name) {
    return name.find("running_mean") != std::string::npos ||
           name.find("running_var") != std::string::npos;
}

} // namespace

const CheckpointRecord* Checkpoint::find(const std::string& name) const {
    for (const auto& r : records)
        if (r.name == name) return &r;
    return nullptr;
}

CheckpointRecord record_from_tensor(const std::string& name, const Tensor& t) {
    CheckpointRecord rec;
    rec.name = name;
    rec.dtype = t.dtype();
    rec.shape = t.shape();
    rec.data.resize(t.numel() * dtype_bytes(t.dtype()));
    if (t.dtype() == DType::f32) {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            float v = static_cast<float>(t.at(i));
            std::memcpy(rec.data.data() + i * 4, &v, 4);
        }
    } else {
        for (std::size_t i = 0; i < t.numel(); ++i) {
            double v = t.at(i);
            std::memcpy(rec.data.data() + i * 8, &v, 8);
        }
    }
    return rec;
}

Tensor tensor_from_record(const CheckpointRecord& rec) {
    std::size_t n = 1;
    for (std::size_t d : rec.shape) n *= d;
    if (rec.data.size() != n * dtype_bytes(rec.dtype))
        throw ConfigError("checkpoint record " + rec.name + " has inconsistent byte length");
    std::vector<double> values(n);
    if (rec.dtype == DType::f32) {
        for (std::size_t i = 0; i < n; ++i) {
            float v;
            std::memcpy(&v, rec.data.data() + i * 4, 4);
            values[i] = static_cast<double>(v);
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            double v;
            std::memcpy(&v, rec.data.data() + i * 8, 8);
            values[i] = v;
        }
    }
    return Tensor::from_vector(rec.shape, values, rec.dtype);
}

Checkpoint checkpoint_from_network(const StudentNetwork& net, bool include_optimizer,
                                   std::uint32_t epoch, double best_top1) {
    Checkpoint ckpt;
    ckpt.config_digest = net.config().digest();
    ckpt.stripped = net.stripped();
    ckpt.epoch = epoch;
    ckpt.best_top1 = best_top1;
    for (const auto& p : net.params()) ckpt.records.push_back(record_from_tensor(p->name, p->value));
    for (const auto& b : net.buffers()) ckpt.records.push_back(record_from_tensor(b->name, b->value));
    if (include_optimizer)
        for (const auto& p : net.params())
            ckpt.records.push_back(record_from_tensor("opt." + p->name, p->velocity));
    return ckpt;
}

void apply_checkpoint(const Checkpoint& ckpt, StudentNetwork& net, bool load_optimizer) {
    if (ckpt.config_digest != net.config().digest())
        throw ConfigError("checkpoint config digest does not match the configured network");
    for (auto& p : net.params()) {
        const CheckpointRecord* rec = ckpt.find(p->name);
        if (!rec) throw ConfigError("checkpoint is missing parameter " + p->name);
        if (rec->dtype != p->value.dtype())
            throw ConfigError("checkpoint precision differs from runtime precision");
        if (rec->shape != p->value.shape())
            throw ConfigError("checkpoint parameter " + p->name + " has unexpected shape");
        p->value = tensor_from_record(*rec);
        p->value.set_requires_grad(true);
        if (load_optimizer) {
            const CheckpointRecord* vrec = ckpt.find("opt." + p->name);
            if (!vrec) throw ConfigError("checkpoint is missing optimizer state for " + p->name);
            p->velocity = tensor_from_record(*vrec);
        } else {
            p->velocity = Tensor::zeros(p->value.shape());
        }
    }
    for (auto& b : net.buffers()) {
        const CheckpointRecord* rec = ckpt.find(b->name);
        if (!rec) throw ConfigError("checkpoint is missing buffer " + b->name);
        b->value = tensor_from_record(*rec);
    }
}

Checkpoint strip_checkpoint(const Checkpoint& ckpt) {
    Checkpoint out;
    out.version = ckpt.version;
    out.config_digest = ckpt.config_digest;
    out.stripped = true;
    out.epoch = ckpt.epoch;
    out.best_top1 = ckpt.best_top1;
    for (const auto& r : ckpt.records) {
        if (starts_with(r.name, "branch") || starts_with(r.name, "opt.")) continue;
        out.records.push_back(r);
    }
    return out;
}

std::size_t checkpoint_parameter_count(const Checkpoint& ckpt) {
    std::size_t n = 0;
    for (const auto& r : ckpt.records) {
        if (starts_with(r.name, "opt.") || is_running_stat(r.name)) continue;
        std::size_t c = 1;
        for (std::size_t d : r.shape) c *= d;
        n += c;
    }
    return n;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u32(out, ckpt.version);
    put_u64(out, ckpt.config_digest);
    out.push_back(ckpt.stripped ? 1 : 0);
    put_u32(out, ckpt.epoch);
    put_f64(out, ckpt.best_top1);
    put_u32(out, static_cast<std::uint32_t>(ckpt.records.size()));
    for (const auto& r : ckpt.records) {
        put_u32(out, static_cast<std::uint32_t>(r.name.size()));
        out.insert(out.end(), r.name.begin(), r.name.end());
        out.push_back(static_cast<std::uint8_t>(r.dtype));
        out.push_back(static_cast<std::uint8_t>(r.shape.size()));
        for (std::size_t d : r.shape) put_u64(out, d);
        put_u64(out, r.data.size());
        out.insert(out.end(), r.data.begin(), r.data.end());
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write " + tmp);
        f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open checkpoint " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    Reader r{bytes};
    if (r.str(4) != std::string(kMagic, 4)) throw ConfigError("not a checkpoint file: bad magic");
    Checkpoint ckpt;
    ckpt.version = r.u32();
    if (ckpt.version != 1) throw ConfigError("unsupported checkpoint version");
    ckpt.config_digest = r.u64();
    ckpt.stripped = r.u8() != 0;
    ckpt.epoch = r.u32();
    ckpt.best_top1 = r.f64();
    std::uint32_t count = r.u32();
    ckpt.records.resize(count);
    for (auto& rec : ckpt.records) {
        rec.name = r.str(r.u32());
        std::uint8_t dt = r.u8();
        if (dt > 1) throw ConfigError("bad dtype tag in checkpoint record " + rec.name);
        rec.dtype = static_cast<DType>(dt);
        std::uint8_t ndim = r.u8();
        rec.shape.resize(ndim);
        for (auto& d : rec.shape) d = static_cast<std::size_t>(r.u64());
        rec.data = r.blob(static_cast<std::size_t>(r.u64()));
    }
    return ckpt;
}

} // namespace lsskd
