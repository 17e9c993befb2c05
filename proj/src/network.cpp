#include "lsskd/network.hpp"

#include <sstream>
#include <stdexcept>

namespace lsskd {

// ---- registry ----------------------------------------------------------------

ParamPtr ParamRegistry::add_param(std::string name, std::vector<std::size_t> shape, InitKind kind,
                                  std::size_t fan_in, bool decay) {
    auto p = std::make_shared<Param>();
    p->name = std::move(name);
    p->value = Tensor::zeros(shape);
    p->value.set_requires_grad(true);
    p->velocity = Tensor::zeros(shape);
    p->decay = decay;
    p->init = kind;
    p->fan_in = fan_in;
    params_.push_back(p);
    return p;
}

BufferPtr ParamRegistry::add_buffer(std::string name, std::vector<std::size_t> shape, double fill) {
    auto b = std::make_shared<Buffer>();
    b->name = std::move(name);
    b->value = Tensor::full(shape, fill);
    buffers_.push_back(b);
    return b;
}

ParamPtr ParamRegistry::find_param(const std::string& name) const {
    for (const auto& p : params_)
        if (p->name == name) return p;
    return nullptr;
}

BufferPtr ParamRegistry::find_buffer(const std::string& name) const {
    for (const auto& b : buffers_)
        if (b->name == name) return b;
    return nullptr;
}

// ---- layers --------------------------------------------------------------------

Tensor BatchNormLayer::forward(const Tensor& x, bool training) const {
    Tensor rm = running_mean->value;
    Tensor rv = running_var->value;
    Tensor y = batchnorm2d(x, scale->value, shift->value, rm, rv, training, momentum, eps);
    if (training) {
        running_mean->value = rm;
        running_var->value = rv;
    }
    return y;
}

Tensor BasicBlock::forward(const Tensor& x, bool training) const {
    Tensor h = relu(bn1.forward(conv1.forward(x), training));
    h = bn2.forward(conv2.forward(h), training);
    Tensor shortcut = has_proj ? proj_bn.forward(proj.forward(x), training) : x;
    return relu(add(h, shortcut));
}

Tensor StageModule::forward(Tensor x, bool training) const {
    for (const auto& b : blocks) x = b.forward(x, training);
    return x;
}

// ---- config ---------------------------------------------------------------------

void BackboneConfig::validate() const {
    if (stages < 2) throw ConfigError("model needs at least 2 stages");
    if (static_cast<int>(channels.size()) != stages)
        throw ConfigError("model.channels must list one width per stage");
    if (static_cast<int>(blocks_per_stage.size()) != stages)
        throw ConfigError("model.blocks must list one depth per stage");
    for (int c : channels)
        if (c < 1) throw ConfigError("stage widths must be positive");
    for (int b : blocks_per_stage)
        if (b < 1) throw ConfigError("stage depths must be positive");
    if (num_classes < 2) throw ConfigError("need at least 2 classes");
    if (num_transforms < 1) throw ConfigError("need at least 1 transform");
    if (in_channels < 1 || height < 1 || width < 1) throw ConfigError("bad input shape");
    // every stage past the first halves the spatial size
    std::size_t h = height, w = width;
    for (int s = 2; s <= stages; ++s) {
        h = (h + 1) / 2;
        w = (w + 1) / 2;
        if (h < 1 || w < 1) throw ConfigError("input too small for the stage count");
    }
}

std::uint64_t BackboneConfig::digest() const {
    std::ostringstream os;
    os << "stages=" << stages << ";channels=";
    for (std::size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
    os << ";blocks=";
    for (std::size_t i = 0; i < blocks_per_stage.size(); ++i)
        os << (i ? "," : "") << blocks_per_stage[i];
    os << ";in=" << in_channels << "x" << height << "x" << width;
    os << ";N=" << num_classes << ";M=" << num_transforms;
    return fnv1a64(os.str());
}

// ---- network ---------------------------------------------------------------------

namespace {

Conv2dLayer make_conv(ParamRegistry& reg, const std::string& name, std::size_t in_ch,
                      std::size_t out_ch, std::size_t k, std::size_t stride, std::size_t pad) {
    Conv2dLayer l;
    l.weight = reg.add_param(name + ".weight", {out_ch, in_ch, k, k}, InitKind::conv_weight,
                             in_ch * k * k, true);
    l.stride = stride;
    l.pad = pad;
    return l;
}

BatchNormLayer make_bn(ParamRegistry& reg, const std::string& name, std::size_t ch) {
    BatchNormLayer l;
    l.scale = reg.add_param(name + ".scale", {ch}, InitKind::norm_scale, 0, false);
    l.shift = reg.add_param(name + ".shift", {ch}, InitKind::norm_shift, 0, false);
    l.running_mean = reg.add_buffer(name + ".running_mean", {ch}, 0.0);
    l.running_var = reg.add_buffer(name + ".running_var", {ch}, 1.0);
    return l;
}

LinearLayer make_linear(ParamRegistry& reg, const std::string& name, std::size_t d, std::size_t k) {
    LinearLayer l;
    l.weight = reg.add_param(name + ".weight", {d, k}, InitKind::linear_weight, d, true);
    l.bias = reg.add_param(name + ".bias", {k}, InitKind::bias, 0, true);
    return l;
}

BasicBlock make_block(ParamRegistry& reg, const std::string& name, std::size_t in_ch,
                      std::size_t out_ch, std::size_t stride) {
    BasicBlock b;
    b.conv1 = make_conv(reg, name + ".conv1", in_ch, out_ch, 3, stride, 1);
    b.bn1 = make_bn(reg, name + ".bn1", out_ch);
    b.conv2 = make_conv(reg, name + ".conv2", out_ch, out_ch, 3, 1, 1);
    b.bn2 = make_bn(reg, name + ".bn2", out_ch);
    b.has_proj = (stride != 1 || in_ch != out_ch);
    if (b.has_proj) {
        b.proj = make_conv(reg, name + ".proj", in_ch, out_ch, 1, stride, 0);
        b.proj_bn = make_bn(reg, name + ".proj_bn", out_ch);
    }
    return b;
}

StageModule make_stage(ParamRegistry& reg, const std::string& name, std::size_t in_ch,
                       std::size_t out_ch, int blocks, std::size_t entry_stride) {
    StageModule st;
    std::size_t ch = in_ch;
    for (int i = 0; i < blocks; ++i) {
        st.blocks.push_back(make_block(reg, name + ".block" + std::to_string(i + 1), ch, out_ch,
                                       i == 0 ? entry_stride : 1));
        ch = out_ch;
    }
    return st;
}

} // namespace

StudentNetwork::StudentNetwork(BackboneConfig cfg, bool stripped)
    : cfg_(std::move(cfg)), stripped_(stripped) {
    cfg_.validate();
    const int L = cfg_.stages;
    stem_conv_ = make_conv(reg_, "stem.conv", cfg_.in_channels, cfg_.channels[0], 3, 1, 1);
    stem_bn_ = make_bn(reg_, "stem.bn", cfg_.channels[0]);
    for (int s = 1; s <= L; ++s) {
        std::size_t in_ch = cfg_.channels[s == 1 ? 0 : s - 2];
        stages_.push_back(make_stage(reg_, "stage" + std::to_string(s), in_ch, cfg_.channels[s - 1],
                                     cfg_.blocks_per_stage[s - 1], s == 1 ? 1 : 2));
    }
    const std::size_t d = cfg_.channels[L - 1];
    fc_ = make_linear(reg_, "fc", d, cfg_.num_classes);
    if (!stripped_) {
        for (int l = 1; l <= L; ++l) {
            Branch br;
            std::string prefix = "branch" + std::to_string(l);
            for (int s = l + 1; s <= L; ++s)
                br.stages.push_back(make_stage(reg_, prefix + ".stage" + std::to_string(s),
                                               cfg_.channels[s - 2], cfg_.channels[s - 1],
                                               cfg_.blocks_per_stage[s - 1], 2));
            br.fc = make_linear(reg_, prefix + ".fc", d, cfg_.joint_count());
            branches_.push_back(std::move(br));
        }
    }
}

void StudentNetwork::init_parameters(std::uint64_t seed) {
    Rng rng(seed);
    for (auto& p : reg_.params()) {
        switch (p->init) {
        case InitKind::conv_weight:
        case InitKind::linear_weight:
            p->value = Tensor::randn_scaled(p->value.shape(), p->fan_in, rng);
            break;
        case InitKind::norm_scale:
            p->value = Tensor::full(p->value.shape(), 1.0);
            break;
        case InitKind::norm_shift:
        case InitKind::bias:
            p->value = Tensor::zeros(p->value.shape());
            break;
        }
        p->value.set_requires_grad(true);
        p->velocity = Tensor::zeros(p->value.shape());
    }
    for (auto& b : reg_.buffers()) {
        bool is_var = b->name.size() >= 11 && b->name.rfind("running_var") == b->name.size() - 11;
        b->value = Tensor::full(b->value.shape(), is_var ? 1.0 : 0.0);
    }
}

std::vector<Tensor> StudentNetwork::backbone_features(const Tensor& x, bool training) {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.height ||
        x.dim(3) != cfg_.width)
        throw std::invalid_argument("input shape " + shape_str(x.shape()) +
                                    " does not match the configured network input");
    Tensor h = relu(stem_bn_.forward(stem_conv_.forward(x), training));
    std::vector<Tensor> feats;
    feats.reserve(stages_.size());
    for (const auto& st : stages_) {
        h = st.forward(h, training);
        feats.push_back(h);
    }
    return feats;
}

ForwardMain StudentNetwork::forward_main(const Tensor& x, bool training) {
    ForwardMain out;
    out.stage_features = backbone_features(x, training);
    out.logits = fc_.forward(global_avg_pool(out.stage_features.back()));
    return out;
}

ForwardAux StudentNetwork::forward_aux(const Tensor& x_expanded, bool training) {
    if (stripped_)
        throw std::logic_error("forward_aux: auxiliary branches were removed at export");
    ForwardAux out;
    std::vector<Tensor> feats = backbone_features(x_expanded, training);
    out.final_pooled = global_avg_pool(feats.back());
    const int L = cfg_.stages;
    for (int l = 0; l < L; ++l) {
        Tensor pooled;
        if (l == L - 1) {
            pooled = out.final_pooled; // branch L shares the backbone's pooled feature
        } else {
            Tensor f = feats[l];
            for (const auto& st : branches_[l].stages) f = st.forward(f, training);
            pooled = global_avg_pool(f);
        }
        out.pooled.push_back(pooled);
        out.sad_logits.push_back(branches_[l].fc.forward(pooled));
    }
    return out;
}

StudentNetwork StudentNetwork::strip_export() const {
    StudentNetwork out(cfg_, /*stripped=*/true);
    for (auto& p : out.reg_.params()) {
        ParamPtr src = reg_.find_param(p->name);
        if (!src) throw std::logic_error("strip_export: missing source parameter " + p->name);
        p->value = src->value.detach();
        p->value.set_requires_grad(true);
        p->velocity = Tensor::zeros(p->value.shape());
    }
    for (auto& b : out.reg_.buffers()) {
        BufferPtr src = reg_.find_buffer(b->name);
        if (!src) throw std::logic_error("strip_export: missing source buffer " + b->name);
        b->value = src->value.detach();
    }
    return out;
}

std::size_t StudentNetwork::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : reg_.params()) n += p->value.numel();
    return n;
}

void StudentNetwork::clear_grads() {
    for (auto& p : reg_.params()) p->value.clear_grad();
}

} // namespace lsskd
