#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dped/losses.hpp"
#include "dped/nets.hpp"
#include "dped/patch.hpp"

namespace dped {

/// Which terms drive the generator. TV regularization applies to every
/// profile except Mse; the discriminator is only trained when texture is used.
enum class LossProfile { Full, ContentTexture, MseTexture, Mse };

inline constexpr std::array<LossProfile, 4> kAllProfiles{LossProfile::Full, LossProfile::ContentTexture,
                                                         LossProfile::MseTexture, LossProfile::Mse};

std::string_view profile_name(LossProfile profile);
/// Accepts full, content_texture, mse_texture, mse; throws InvalidSpec.
LossProfile parse_profile(std::string_view name);

struct ProfileTerms {
  bool content = false;
  bool texture = false;
  bool color = false;
  bool tv = false;
  bool mse = false;
};
ProfileTerms profile_terms(LossProfile profile);

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  int batch_size = 50;
  int iterations = 20000;
  AdamConfig adam;
  int pretrain_iters = 2000;
  LossWeights loss_weights;
  std::string content_layer{kDefaultContentLayer};
  std::uint64_t seed = 0;
  int checkpoint_every = 1000;
  LossProfile profile = LossProfile::Full;
  int d_steps_per_g = 1;
  double bn_momentum = 0.1;
  NormConvention norm = NormConvention::Squared;
  GaussianKernelSpec color_kernel;
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;

  /// Throws InvalidSpec.
  void validate() const;
};

/// Digest of every field that shapes the trajectory (iterations and
/// checkpoint_every excluded, so a run can be extended by resuming).
std::string config_hash(const TrainConfig& cfg);

/// Adam moments for the trainable tensors of one network.
template <typename T>
struct AdamMoments {
  ParamSet<T> m;
  ParamSet<T> v;
  long step = 0;
};

template <typename T>
AdamMoments<T> adam_init(const ParamSet<T>& params);

/// One Adam update at iteration t (>= 1) with bias correction. Throws
/// ShapeError on mismatched tensors and NonFiniteGradient on non-finite
/// gradients or updates.
template <typename T>
void adam_step(ParamSet<T>& params, const ParamSet<T>& grads, AdamMoments<T>& moments, long t, const AdamConfig& cfg);

/// How often each loss component has been evaluated.
struct EvalCounters {
  long content = 0;
  long texture = 0;
  long color = 0;
  long tv = 0;
  long mse = 0;
  long discriminator_steps = 0;
  bool operator==(const EvalCounters&) const = default;
};

struct TrainState {
  GeneratorWeights<float> generator;
  DiscriminatorWeights<float> discriminator;
  AdamMoments<float> g_moments;
  AdamMoments<float> d_moments;
  long iteration = 0;
  std::mt19937_64 rng;
  EvalCounters counters;
  /// Exponential moving average of the generator total (0 before the first step).
  double loss_ema = 0.0;
};

/// Fresh networks and moments derived from cfg.seed.
TrainState make_train_state(const TrainConfig& cfg);

struct StepResult {
  LossBreakdown losses;
  double d_loss = 0.0;
  double d_acc = 0.0;
};

/// Discriminator updates then one generator update. `vgg` is required when
/// the profile uses the content loss. Throws NonFiniteLoss.
StepResult train_step(TrainState& state, const std::vector<const PatchPair*>& batch, const TrainConfig& cfg,
                      const VggWeights<float>* vgg);

/// Uniform sampling with replacement from the state's RNG.
std::vector<const PatchPair*> sample_batch(const std::vector<PatchPair>& data, int batch_size, std::mt19937_64& rng);

/// Trains state.discriminator for cfg.pretrain_iters on grayscale phone
/// patches (fake) against grayscale DSLR patches (real). Returns the accuracy
/// on the last training batch, or nullopt when no iteration ran. The
/// discriminator Adam moments are reset afterwards. Throws EmptyDataset.
std::optional<double> pretrain_discriminator(TrainState& state, const std::vector<PatchPair>& data,
                                             const TrainConfig& cfg);

struct LogRow {
  long iter = 0;
  LossBreakdown losses;
  double d_loss = 0.0;
  double d_acc = 0.0;
  double wallclock_ms = 0.0;
};

std::string log_row_json(const LogRow& row);

void save_checkpoint(const TrainState& state, const TrainConfig& cfg, const std::filesystem::path& dir);
/// Restores a checkpoint; throws InvalidSpec when its config hash differs.
TrainState load_checkpoint(const std::filesystem::path& dir, const TrainConfig& cfg);

struct TrainOptions {
  std::filesystem::path out_dir;
  const VggWeights<float>* vgg = nullptr;
  std::optional<std::filesystem::path> resume_from;
  std::function<void(const LogRow&)> on_row;
};

struct TrainResult {
  TrainState state;
  std::optional<double> pretrain_accuracy;
  std::filesystem::path final_checkpoint;
  std::vector<LogRow> log;
};

/// Pretraining (skipped on resume) followed by iterations up to
/// cfg.iterations. Writes <out>/train_log.ndjson and checkpoints under
/// <out>/checkpoints/<iter>. On divergence writes <out>/divergence.json and
/// rethrows NonFiniteLoss. Throws EmptyDataset when data has fewer than
/// batch_size pairs.
TrainResult train(const std::vector<PatchPair>& data, const TrainConfig& cfg, const TrainOptions& options);

}  // namespace dped
