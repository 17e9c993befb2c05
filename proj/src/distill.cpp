#include "lsskd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

namespace lsskd {

namespace {

std::vector<double> softmax_rows_double(const std::vector<double>& z, double tau) {
    double m = z[0];
    for (double v : z) m = std::max(m, v);
    std::vector<double> p(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        p[i] = std::exp((z[i] - m) / tau);
        s += p[i];
    }
    for (auto& v : p) v /= s;
    return p;
}

SoftTarget soften(const std::vector<double>& one_hot, const std::vector<double>* prev_logits,
                  double alpha, double tau) {
    if (alpha < 0.0 || alpha > 1.0)
        throw std::invalid_argument("soften: alpha must lie in [0,1]");
    SoftTarget out;
    if (prev_logits == nullptr) {
        out.probs = one_hot;
        out.softened = false;
        return out;
    }
    if (prev_logits->size() != one_hot.size())
        throw std::invalid_argument("soften: previous logits have the wrong length");
    std::vector<double> prev = softmax_rows_double(*prev_logits, tau);
    out.probs.resize(one_hot.size());
    for (std::size_t i = 0; i < one_hot.size(); ++i)
        out.probs[i] = (1.0 - alpha) * one_hot[i] + alpha * prev[i];
    out.softened = true;
    return out;
}

} // namespace

void Hyperparams::validate() const {
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("distill.alpha must lie in [0,1]");
    if (beta < 0.0 || beta > 1.0) throw ConfigError("distill.beta must lie in [0,1]");
    if (gamma < 0.0) throw ConfigError("distill.gamma must be non-negative");
    if (tau_kd <= 0.0) throw ConfigError("distill.tau_kd must be positive");
    if (tau_ce <= 0.0) throw ConfigError("tau_ce must be positive");
}

double Hyperparams::alpha_at(std::uint32_t epoch, std::uint32_t total_epochs) const {
    if (!alpha_warmup || total_epochs == 0) return alpha;
    return alpha * static_cast<double>(epoch) / static_cast<double>(total_epochs);
}

SoftTarget soften_final(const std::vector<double>& one_hot,
                        const std::vector<double>* prev_logits, double alpha, double tau_ce) {
    return soften(one_hot, prev_logits, alpha, tau_ce);
}

SoftTarget soften_sad(const std::vector<double>& joint_one_hot,
                      const std::vector<double>* prev_sad_logits, double alpha, double tau_kd) {
    return soften(joint_one_hot, prev_sad_logits, alpha, tau_kd);
}

// ---- losses -------------------------------------------------------------------

Tensor loss_ce_resp(const Tensor& final_logits, const Tensor& soft_targets, double tau_ce) {
    return cross_entropy_soft(final_logits, soft_targets, tau_ce);
}

Tensor loss_ce_hier_sad(const std::vector<std::vector<Tensor>>& sad_logits,
                        const std::vector<std::vector<Tensor>>& soft_targets, double tau_kd) {
    if (sad_logits.empty() || sad_logits.size() != soft_targets.size())
        throw std::invalid_argument("loss_ce_hier_sad: stage arity mismatch");
    const std::size_t M = sad_logits[0].size();
    Tensor acc;
    for (std::size_t l = 0; l < sad_logits.size(); ++l) {
        if (sad_logits[l].size() != M || soft_targets[l].size() != M)
            throw std::invalid_argument("loss_ce_hier_sad: transform arity mismatch");
        for (std::size_t j = 0; j < M; ++j) {
            Tensor term = cross_entropy_soft(sad_logits[l][j], soft_targets[l][j], tau_kd);
            acc = acc.defined() ? add(acc, term) : term;
        }
    }
    return scale(acc, 1.0 / static_cast<double>(M));
}

Tensor loss_div_sad(const std::vector<std::vector<Tensor>>& shallow_sad_logits,
                    const std::vector<Tensor>& deep_sad_logits_detached, double tau_kd) {
    const std::size_t M = deep_sad_logits_detached.size();
    if (M == 0) throw std::invalid_argument("loss_div_sad: no transforms");
    std::vector<Tensor> deep_p;
    deep_p.reserve(M);
    for (const auto& q : deep_sad_logits_detached) {
        if (q.requires_grad())
            throw std::invalid_argument("loss_div_sad: deep logits must be detached");
        deep_p.push_back(softmax_t(q, tau_kd));
    }
    Tensor acc;
    for (const auto& stage : shallow_sad_logits) {
        if (stage.size() != M)
            throw std::invalid_argument("loss_div_sad: transform arity mismatch");
        for (std::size_t j = 0; j < M; ++j) {
            Tensor term = kl_div(softmax_t(stage[j], tau_kd), deep_p[j]);
            acc = acc.defined() ? add(acc, term) : term;
        }
    }
    if (!acc.defined()) return Tensor::scalar(0.0);
    return scale(acc, tau_kd * tau_kd / static_cast<double>(M));
}

Tensor loss_feat(const std::vector<Tensor>& shallow_pooled, const Tensor& final_pooled_detached) {
    if (final_pooled_detached.requires_grad())
        throw std::invalid_argument("loss_feat: final pooled feature must be detached");
    if (shallow_pooled.empty()) return Tensor::scalar(0.0);
    const std::size_t rows = final_pooled_detached.dim(0);
    Tensor acc;
    for (const auto& f : shallow_pooled) {
        if (f.shape() != final_pooled_detached.shape())
            throw std::invalid_argument("loss_feat: pooled feature dimension mismatch");
        Tensor term = sum_squared_diff(f, final_pooled_detached);
        acc = acc.defined() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / static_cast<double>(shallow_pooled.size() * rows));
}

Tensor total_loss(const Tensor& ce_resp, const Tensor& ce_hier, const Tensor& div_sad,
                  const Tensor& feat, double beta, double gamma) {
    Tensor t = add(scale(ce_resp, 1.0 - beta), ce_hier);
    t = add(t, scale(div_sad, beta));
    return add(t, scale(feat, gamma));
}

// ---- prediction store ------------------------------------------------------------

namespace {
constexpr char kStoreMagic[4] = {'L', 'S', 'P', 'S'};

void sput_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void sput_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void sput_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    sput_u32(out, bits);
}
} // namespace

PredictionStore::PredictionStore(int n, int m, int l) : n_(n), m_(m), l_(l) {}

void PredictionStore::begin_epoch(std::uint32_t epoch) {
    if (epoch == 0) throw std::invalid_argument("epochs are 1-based");
    if (write_epoch_ + 1 == epoch)
        read_ = std::move(write_);
    else
        read_.clear();
    write_.clear();
    write_epoch_ = epoch;
}

void PredictionStore::update(std::int64_t sample_id, std::vector<float> final_logits,
                             std::vector<std::vector<float>> sad_logits) {
    if (static_cast<int>(final_logits.size()) != n_ ||
        static_cast<int>(sad_logits.size()) != l_ * m_)
        throw std::invalid_argument("prediction record arity mismatch");
    auto [it, inserted] = write_.try_emplace(sample_id);
    if (!inserted)
        throw std::invalid_argument("duplicate prediction update for sample " +
                                    std::to_string(sample_id) + " in epoch " +
                                    std::to_string(write_epoch_));
    it->second.final_logits = std::move(final_logits);
    it->second.sad_logits = std::move(sad_logits);
}

const PredictionRecord* PredictionStore::fetch(std::uint32_t epoch, std::int64_t sample_id) const {
    if (epoch + 1 != write_epoch_) return nullptr; // only the previous epoch is retained
    auto it = read_.find(sample_id);
    return it == read_.end() ? nullptr : &it->second;
}

void PredictionStore::save(const std::string& path) const {
    const int k = n_ * m_;
    std::vector<std::uint8_t> out;
    out.insert(out.end(), kStoreMagic, kStoreMagic + 4);
    sput_u32(out, 1); // version
    sput_u32(out, write_epoch_);
    sput_u32(out, static_cast<std::uint32_t>(n_));
    sput_u32(out, static_cast<std::uint32_t>(m_));
    sput_u32(out, static_cast<std::uint32_t>(l_));
    sput_u32(out, static_cast<std::uint32_t>(k));
    sput_u64(out, write_.size());
    std::vector<std::int64_t> ids;
    ids.reserve(write_.size());
    for (const auto& [id, _] : write_) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    for (std::int64_t id : ids) {
        const PredictionRecord& rec = write_.at(id);
        sput_u64(out, static_cast<std::uint64_t>(id));
        for (float v : rec.final_logits) sput_f32(out, v);
        for (const auto& slot : rec.sad_logits) {
            if (static_cast<int>(slot.size()) != k)
                throw std::logic_error("prediction record has wrong SAD length");
            for (float v : slot) sput_f32(out, v);
        }
    }
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write " + tmp);
        f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
    }
    std::filesystem::rename(tmp, path);
}

PredictionStore PredictionStore::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open prediction store " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    auto need = [&](std::size_t n) {
        if (pos + n > bytes.size()) throw DataError("prediction store truncated");
    };
    auto u32 = [&]() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= std::uint32_t(bytes[pos++]) << (8 * i);
        return v;
    };
    auto u64 = [&]() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= std::uint64_t(bytes[pos++]) << (8 * i);
        return v;
    };
    auto f32 = [&]() {
        std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    };
    need(4);
    if (std::memcmp(bytes.data(), kStoreMagic, 4) != 0)
        throw DataError("not a prediction store: bad magic");
    pos = 4;
    if (u32() != 1) throw DataError("unsupported prediction store version");
    std::uint32_t epoch = u32();
    int n = static_cast<int>(u32());
    int m = static_cast<int>(u32());
    int l = static_cast<int>(u32());
    int k = static_cast<int>(u32());
    if (k != n * m) throw DataError("prediction store header is inconsistent");
    std::uint64_t count = u64();
    PredictionStore store(n, m, l);
    store.write_epoch_ = epoch;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::int64_t id = static_cast<std::int64_t>(u64());
        PredictionRecord rec;
        rec.final_logits.resize(n);
        for (auto& v : rec.final_logits) v = f32();
        rec.sad_logits.resize(static_cast<std::size_t>(l) * m);
        for (auto& slot : rec.sad_logits) {
            slot.resize(k);
            for (auto& v : slot) v = f32();
        }
        store.write_.emplace(id, std::move(rec));
    }
    return store;
}

} // namespace lsskd
