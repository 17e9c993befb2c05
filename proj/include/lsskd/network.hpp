#pragma once

#include <memory>
#include <string>
#include <vector>

#include "lsskd/tensor.hpp"

namespace lsskd {

enum class InitKind { conv_weight, linear_weight, norm_scale, norm_shift, bias };

struct Param {
    std::string name;
    Tensor value;    // requires_grad
    Tensor velocity; // SGD momentum state, same shape
    bool decay = true;
    InitKind init = InitKind::conv_weight;
    std::size_t fan_in = 0;
};
using ParamPtr = std::shared_ptr<Param>;

struct Buffer {
    std::string name;
    Tensor value; // no gradient; replaced by train-mode batch norm
};
using BufferPtr = std::shared_ptr<Buffer>;

class ParamRegistry {
public:
    ParamPtr add_param(std::string name, std::vector<std::size_t> shape, InitKind kind,
                       std::size_t fan_in, bool decay);
    BufferPtr add_buffer(std::string name, std::vector<std::size_t> shape, double fill);
    std::vector<ParamPtr>& params() { return params_; }
    const std::vector<ParamPtr>& params() const { return params_; }
    std::vector<BufferPtr>& buffers() { return buffers_; }
    const std::vector<BufferPtr>& buffers() const { return buffers_; }
    ParamPtr find_param(const std::string& name) const;
    BufferPtr find_buffer(const std::string& name) const;

private:
    std::vector<ParamPtr> params_;
    std::vector<BufferPtr> buffers_;
};

// ---- layers -----------------------------------------------------------------

struct Conv2dLayer {
    ParamPtr weight; // [O,C,kh,kw], bias-free (a norm layer always follows)
    std::size_t stride = 1, pad = 1;
    Tensor forward(const Tensor& x) const { return conv2d(x, weight->value, stride, pad); }
};

struct BatchNormLayer {
    ParamPtr scale, shift;
    BufferPtr running_mean, running_var;
    double momentum = 0.1, eps = 1e-5;
    Tensor forward(const Tensor& x, bool training) const;
};

struct LinearLayer {
    ParamPtr weight; // [D,K]
    ParamPtr bias;   // [K]
    Tensor forward(const Tensor& x) const { return linear(x, weight->value, bias->value); }
};

/// conv-norm-relu, conv-norm, identity (or projected) shortcut, relu.
struct BasicBlock {
    Conv2dLayer conv1;
    BatchNormLayer bn1;
    Conv2dLayer conv2;
    BatchNormLayer bn2;
    bool has_proj = false;
    Conv2dLayer proj;
    BatchNormLayer proj_bn;
    Tensor forward(const Tensor& x, bool training) const;
};

struct StageModule {
    std::vector<BasicBlock> blocks;
    Tensor forward(Tensor x, bool training) const;
};

// ---- network ----------------------------------------------------------------

struct BackboneConfig {
    int stages = 3;
    std::vector<int> channels = {16, 32, 64};
    std::vector<int> blocks_per_stage = {2, 2, 2};
    std::size_t in_channels = 3;
    std::size_t height = 32, width = 32;
    int num_classes = 10;  // N
    int num_transforms = 4; // M

    int joint_count() const { return num_classes * num_transforms; }
    void validate() const;
    /// Digest of the architecture-determining fields; stored in checkpoints.
    std::uint64_t digest() const;
};

struct ForwardMain {
    Tensor logits;                      // [B, N]
    std::vector<Tensor> stage_features; // L feature maps
};

struct ForwardAux {
    std::vector<Tensor> sad_logits; // L tensors [MB, K]
    std::vector<Tensor> pooled;     // L tensors [MB, d]; pooled[L-1] is final_pooled
    Tensor final_pooled;            // F^o, [MB, d]
};

/// L-stage residual student with one K-way auxiliary head per stage. Stage L's
/// head pools the backbone output directly; earlier heads run independently
/// parameterized copies of the remaining stages first, so every pooled feature
/// has the final stage's dimension.
class StudentNetwork {
public:
    explicit StudentNetwork(BackboneConfig cfg, bool stripped = false);
    StudentNetwork(const StudentNetwork&) = delete;
    StudentNetwork& operator=(const StudentNetwork&) = delete;
    StudentNetwork(StudentNetwork&&) = default;
    StudentNetwork& operator=(StudentNetwork&&) = default;

    void init_parameters(std::uint64_t seed);

    ForwardMain forward_main(const Tensor& x, bool training);
    ForwardAux forward_aux(const Tensor& x_expanded, bool training);

    /// Inference copy: backbone, pooling and final classifier only. Outputs
    /// are bitwise equal to forward_main of the full network.
    StudentNetwork strip_export() const;

    bool stripped() const { return stripped_; }
    const BackboneConfig& config() const { return cfg_; }
    std::vector<ParamPtr>& params() { return reg_.params(); }
    const std::vector<ParamPtr>& params() const { return reg_.params(); }
    std::vector<BufferPtr>& buffers() { return reg_.buffers(); }
    const std::vector<BufferPtr>& buffers() const { return reg_.buffers(); }
    ParamPtr find_param(const std::string& name) const { return reg_.find_param(name); }
    std::size_t parameter_count() const;

    void clear_grads();

private:
    std::vector<Tensor> backbone_features(const Tensor& x, bool training);

    BackboneConfig cfg_;
    bool stripped_ = false;
    ParamRegistry reg_;
    Conv2dLayer stem_conv_;
    BatchNormLayer stem_bn_;
    std::vector<StageModule> stages_;
    LinearLayer fc_; // [d, N]
    struct Branch {
        std::vector<StageModule> stages; // empty for the last branch
        LinearLayer fc;                  // [d, K]
    };
    std::vector<Branch> branches_;
};

} // namespace lsskd
