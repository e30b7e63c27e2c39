#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cortexbridge/autodiff.hpp"
#include "cortexbridge/bridge.hpp"
#include "cortexbridge/disk.hpp"
#include "cortexbridge/grid.hpp"
#include "cortexbridge/metrics.hpp"

namespace cortexbridge::bridge {

// Named slices of a flat parameter vector, in graph consumption order.
struct ParamEntry {
    std::string name;
    std::vector<int> shape;
    size_t offset = 0;
};

struct ParamLayout {
    std::vector<ParamEntry> entries;
    size_t total = 0;

    size_t add(std::string name, std::vector<int> shape);
};

struct GeneratorConfig {
    std::string arch = "unet";  // "unet" | "mlp"
    int image_h = 32, image_w = 32;
    int base_channels = 16;
    int depth = 4;  // down/up pairs; image sides must be divisible by 2^depth
    int max_channels = 64;
    int noise_channels = 1;   // concatenated at the bottleneck
    int time_embed_dim = 8;   // sin/cos features, even
    int mlp_hidden = 64;
    int mlp_noise_dim = 4;
    double final_init_scale = 0.0;  // 0 keeps the map an exact identity at init
    uint64_t seed = 1;
};

struct GeneratorModel {
    GeneratorConfig cfg;
    ParamLayout layout;
    std::vector<double> phi;
};

struct CriticConfig {
    std::string arch = "conv";  // "conv" | "mlp"
    int image_h = 32, image_w = 32;
    int base_channels = 16;
    int blocks = 4;
    int max_channels = 64;
    int mlp_hidden = 64;
    double final_init_scale = 0.0;  // 0 makes the initial critic output exactly 0
    uint64_t seed = 2;
};

struct CriticModel {
    CriticConfig cfg;
    ParamLayout layout;
    std::vector<double> theta;
};

ParamLayout generator_layout(const GeneratorConfig& cfg);
ParamLayout critic_layout(const CriticConfig& cfg);
GeneratorModel make_generator(const GeneratorConfig& cfg);
CriticModel make_critic(const CriticConfig& cfg);

// Per-sample noise element count fed to the generator, and its tensor shape.
int noise_len(const GeneratorConfig& cfg);
std::vector<int> noise_shape(const GeneratorConfig& cfg, int batch);

// Tape inputs for each layout entry, in order.
struct ParamBinding {
    std::vector<int> id;
};
ParamBinding bind_params(ad::Tape& t, const ParamLayout& layout, const double* flat,
                         bool needs_grad);
// Copies entry gradients back into a flat vector (adds into grad_out).
void collect_param_grads(const ad::Tape& t, const ParamLayout& layout,
                         const ParamBinding& bind, double* grad_out);

// x: [B,1,H,W]; noise: [B, nc, H>>depth, W>>depth] (unet) or [B, noise_dim]
// (mlp). Returns the endpoint prediction [B,1,H,W].
int generator_graph(ad::Tape& t, const GeneratorConfig& cfg, const ParamBinding& p, int x,
                    double t_i, int noise);
// x: [B,1,H,W]; returns logits [B,1].
int critic_graph(ad::Tape& t, const CriticConfig& cfg, const ParamBinding& p, int x);

// Draws noise from rng, runs the generator, zeroes pixels outside the mask.
GridImage predict(const GeneratorModel& gen, const GridImage& x, const GridMask& mask,
                  double t, std::mt19937_64& rng);

struct ModelSampler : Sampler {
    const GeneratorModel* gen = nullptr;
    const GridMask* mask = nullptr;
    ModelSampler(const GeneratorModel& g, const GridMask& m) : gen(&g), mask(&m) {}
    GridImage predict(const GridImage& x, double t, std::mt19937_64& rng) const override;
};

// Logistic adversarial pair: critic term is the balanced real/fake
// classification loss, generator term the non-saturating objective.
std::pair<double, double> adv_loss(const CriticModel& critic, const std::vector<GridImage>& real,
                                   const std::vector<GridImage>& fake, const GridMask& mask);

// One training step's frozen inputs; freezing noise makes the losses exact
// deterministic functions of the parameters.
struct StepBatch {
    std::vector<GridImage> x0;   // source originals (structure anchors)
    std::vector<GridImage> x_t;  // simulated states at t_i
    std::vector<GridImage> real;
    double t_i = 0.0;
    GridMask mask;
    std::vector<double> noise;          // [B * noise_len]
    std::vector<double> entropy_noise;  // [M * noise_len], empty disables the proxy
    int entropy_anchor = 0;             // x_t index the entropy draws share
};

struct LossParts {
    double adv = 0, sb = 0, nce = 0, msssim = 0, total = 0;
};

// Sparse-matrix form of the multi-scale window plan, reusable across steps.
struct MsssimGraph {
    int levels = 0;
    double c1 = 0, c2 = 0;
    std::vector<double> weights;
    std::vector<int> n_windows;
    std::vector<std::shared_ptr<const ad::SparseMat>> win;
    std::vector<std::shared_ptr<const ad::SparseMat>> pool;  // size levels-1
};
MsssimGraph make_msssim_graph(const metrics::MsssimPlan& plan, double data_range = 2.0);
int msssim_loss_graph(ad::Tape& t, const MsssimGraph& g, int x0, int x1_hat);

LossParts generator_loss(const GeneratorModel& gen, const CriticModel& critic,
                         const StepBatch& b, const BridgeConfig& cfg, const PatchPlan& patches,
                         const MsssimGraph& msgraph, std::vector<double>* grad_phi);
double critic_loss(const CriticModel& critic, const std::vector<GridImage>& real,
                   const std::vector<GridImage>& fake, const GridMask& mask,
                   std::vector<double>* grad_theta);

struct TrainOptions {
    int epochs = 30;
    int batch_size = 8;
    double lr = 1e-4;
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;
    int checkpoint_every = 10;
    std::string checkpoint_dir;  // empty: no checkpoint files
    int entropy_batch = 8;
    GeneratorConfig gen;
    CriticConfig critic;
    PatchConfig patches;
};

struct EpochStats {
    int epoch = 0;
    double l_adv = 0, l_sb = 0, l_nce = 0, l_msssim = 0, total = 0;
};

struct TrainResult {
    GeneratorModel gen;
    CriticModel critic;
    std::vector<EpochStats> history;
};

// Alternating critic/generator updates on unpaired series sets. Learning rate
// holds for the first half of the epochs, then decays linearly to zero. Any
// non-finite loss aborts with the last epoch's parameters checkpointed.
TrainResult train(const BridgeConfig& cfg, const std::vector<disk::DiskSeries>& source,
                  const std::vector<disk::DiskSeries>& target, const TrainOptions& opt,
                  std::mt19937_64& rng);

struct EnhanceResult {
    disk::DiskSeries series;
    std::vector<double> trajectory_variance;  // per disk: masked-mean variance across states
};
EnhanceResult enhance(const disk::DiskSeries& input, const GeneratorModel& gen,
                      const BridgeConfig& cfg, std::mt19937_64& rng);

// Checkpoint container: magic, length-prefixed config JSON, f32 parameters.
void save_generator(const std::string& path, const GeneratorModel& gen);
GeneratorModel load_generator(const std::string& path);
void save_critic(const std::string& path, const CriticModel& critic);
CriticModel load_critic(const std::string& path);

void write_history_csv(const std::string& path, const std::vector<EpochStats>& history);

}  // namespace cortexbridge::bridge
