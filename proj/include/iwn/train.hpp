#pragma once

#include <omp.h>

#include <cstdint>
#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "iwn/adam.hpp"
#include "iwn/checkpoint.hpp"
#include "iwn/coupling.hpp"
#include "iwn/dataset.hpp"
#include "iwn/distort.hpp"
#include "iwn/loss.hpp"
#include "iwn/metrics.hpp"
#include "iwn/msgcodec.hpp"
#include "iwn/rng.hpp"

namespace iwn {

struct TrainConfig {
  double lr = 2e-4;
  int batch = 6;
  int blocks = 16;
  int msg_bits = 30;    // l
  int msg_groups = 10;  // c
  int image_size = 128;
  int patch_size = 480;
  int hidden = 32;
  double clamp = 2.0;
  NoiseModel noise = NoiseModel::identity_only();
  int max_steps = 2000;
  std::uint64_t seed = 1;
  int checkpoint_every = 500;
  bool augment = true;

  // Stage switch (non-identity pools): move to the imperceptibility stage
  // when the windowed bit accuracy improves by less than stage_min_improve,
  // bounded by a hard floor and cap on the stage length.
  int stage_window = 200;
  double stage_min_improve = 0.005;
  int stage_min_steps = 400;
  int stage_max_steps = 1 << 20;

  // Held-out early stop; eval_every = 0 disables.
  int eval_every = 0;
  int eval_images = 8;
  double stop_acc = 0.0;
  double stop_psnr = 0.0;

  void validate() const {
    require(lr > 0, "config: lr must be positive");
    require(batch >= 1, "config: batch must be >= 1");
    require(blocks >= 2 && blocks <= 32, "config: blocks must be in 2..32");
    require(msg_bits >= 1 && msg_groups >= 1, "config: message sizes must be positive");
    require(msg_bits % msg_groups == 0,
            "config: group count must divide bit length");
    const int r = msg_bits / msg_groups;
    require(r >= 1 && r <= 8, "config: bits per group must be in 1..8");
    require(image_size >= 8, "config: image size must be >= 8");
    require(max_steps >= 0, "config: max_steps must be >= 0");
    require(hidden >= 1, "config: hidden width must be >= 1");
    require(clamp > 0, "config: clamp must be positive");
    noise.validate();
  }
};

inline void to_json(nlohmann::json& j, const NoiseModel& m) {
  nlohmann::json probs;
  for (const auto& [kind, prob] : m.probs) probs[noise_kind_name(kind)] = prob;
  j = nlohmann::json{{"probs", probs},
                     {"crop_p", m.crop_p},
                     {"cropout_p", m.cropout_p},
                     {"dropout_p", m.dropout_p},
                     {"gaussian_sigma", m.gaussian_sigma},
                     {"jpeg_qs", m.jpeg_qs}};
}

inline void from_json(const nlohmann::json& j, NoiseModel& m) {
  m = NoiseModel{};
  if (j.contains("probs")) {
    m.probs.clear();
    for (const auto& [name, prob] : j.at("probs").items())
      m.probs[noise_kind_from_name(name)] = prob.get<double>();
  }
  if (j.contains("crop_p")) m.crop_p = j.at("crop_p").get<double>();
  if (j.contains("cropout_p")) m.cropout_p = j.at("cropout_p").get<double>();
  if (j.contains("dropout_p")) m.dropout_p = j.at("dropout_p").get<double>();
  if (j.contains("gaussian_sigma")) m.gaussian_sigma = j.at("gaussian_sigma").get<double>();
  if (j.contains("jpeg_qs")) m.jpeg_qs = j.at("jpeg_qs").get<std::vector<int>>();
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr", c.lr},
                     {"batch", c.batch},
                     {"blocks", c.blocks},
                     {"msg_bits", c.msg_bits},
                     {"msg_groups", c.msg_groups},
                     {"image_size", c.image_size},
                     {"patch_size", c.patch_size},
                     {"hidden", c.hidden},
                     {"clamp", c.clamp},
                     {"noise", c.noise},
                     {"max_steps", c.max_steps},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"augment", c.augment},
                     {"stage_window", c.stage_window},
                     {"stage_min_improve", c.stage_min_improve},
                     {"stage_min_steps", c.stage_min_steps},
                     {"stage_max_steps", c.stage_max_steps},
                     {"eval_every", c.eval_every},
                     {"eval_images", c.eval_images},
                     {"stop_acc", c.stop_acc},
                     {"stop_psnr", c.stop_psnr}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c = TrainConfig{};
  auto get = [&j](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  get("lr", c.lr);
  get("batch", c.batch);
  get("blocks", c.blocks);
  get("msg_bits", c.msg_bits);
  get("msg_groups", c.msg_groups);
  get("image_size", c.image_size);
  get("patch_size", c.patch_size);
  get("hidden", c.hidden);
  get("clamp", c.clamp);
  if (j.contains("noise")) c.noise = j.at("noise").get<NoiseModel>();
  get("max_steps", c.max_steps);
  get("seed", c.seed);
  get("checkpoint_every", c.checkpoint_every);
  get("augment", c.augment);
  get("stage_window", c.stage_window);
  get("stage_min_improve", c.stage_min_improve);
  get("stage_min_steps", c.stage_min_steps);
  get("stage_max_steps", c.stage_max_steps);
  get("eval_every", c.eval_every);
  get("eval_images", c.eval_images);
  get("stop_acc", c.stop_acc);
  get("stop_psnr", c.stop_psnr);
}

struct TrainResult {
  CouplingStack<float> stack{2, 1, 1};
  Checkpoint meta;
  std::string metric_log;
  std::int64_t steps_run = 0;
  bool aborted = false;
  double final_holdout_acc = 0.0;
  double final_holdout_psnr = 0.0;
};

namespace detail {

struct ItemOutcome {
  std::vector<std::vector<float>> grads;  // one flat buffer per parameter
  double l_w = 0, l_m = 0, l_z = 0, l_c = 0, l_total = 0;
  double acc = 0;
};

// Full differentiable pipeline for one training item:
// embed -> quantize -> attack -> extract -> losses -> backward.
inline ItemOutcome run_item(CouplingStack<float>& stack, const Tensor<float>& cover,
                            const BitMessage& msg, const NoiseSpec& spec,
                            const LossWeights<float>& weights) {
  const int h = cover.shape.h, w = cover.shape.w;
  const int c = stack.msg_channels();
  const Tensor<float> m_in = broadcast<float>(encode_groups(msg), h, w);

  Tape<float> tape(true);
  auto cover_node = tape.constant(cover);
  auto m_in_node = tape.constant(m_in);
  auto emb = stack.embed(tape, m_in_node, cover_node);
  auto wm_q = tape.quantize_ste(emb.image);
  auto attack = apply_attack(tape, wm_q, cover, spec);

  const Shape noised_shape = tape.value(attack.noised).shape;
  auto z_node = tape.constant(
      Tensor<float>::constant(noised_shape.h, noised_shape.w, c, 0.5f));
  auto ext = stack.extract(tape, z_node, attack.noised);

  PipelineNodes<float> outputs{emb.image, emb.msg, ext.msg, ext.image};
  PipelineTargets<float> targets;
  targets.cover = cover_node;
  targets.z_const = tape.constant(Tensor<float>::constant(h, w, c, 0.5f));
  std::optional<RegionMask> region;
  if (spec.kind == NoiseKind::Crop) {
    const Rect r = attack.region.value();
    region = RegionMask{r, h, w};
    Tape<float> crop_helper(false);
    targets.m_in = tape.constant(
        crop_helper.value(crop_helper.crop_rect(crop_helper.constant(m_in), r)));
    targets.cover_for_rec = tape.constant(
        crop_helper.value(crop_helper.crop_rect(crop_helper.constant(cover), r)));
  } else if (spec.kind == NoiseKind::Cropout) {
    region = RegionMask{attack.region.value(), h, w};
    targets.m_in = m_in_node;
    targets.cover_for_rec = cover_node;
  } else {
    targets.m_in = m_in_node;
    targets.cover_for_rec = cover_node;
  }

  auto losses = total_loss(tape, outputs, targets, weights, region);
  tape.backward(losses.total);

  ItemOutcome out;
  out.l_w = tape.value(losses.l_w).data[0];
  out.l_m = tape.value(losses.l_m).data[0];
  out.l_z = tape.value(losses.l_z).data[0];
  out.l_c = tape.value(losses.l_c).data[0];
  out.l_total = tape.value(losses.total).data[0];
  out.grads.reserve(stack.params().size());
  for (const auto& p : stack.params()) out.grads.push_back(tape.param_grad(p));
  const BitMessage decoded =
      decode_message(tape.value(ext.msg), msg.length(), msg.groups);
  out.acc = bit_accuracy(msg, decoded);
  return out;
}

struct HoldoutScore {
  double acc = 0;
  double psnr_db = 0;
};

// Deterministic identity+quantization held-out evaluation.
inline HoldoutScore eval_holdout(CouplingStack<float>& stack, const Dataset& data,
                                 const TrainConfig& cfg) {
  const int n = std::min<int>(cfg.eval_images,
                              std::max<std::size_t>(data.holdout_files().size(), 1));
  double acc_sum = 0, psnr_sum = 0;
  int psnr_n = 0;
  for (int i = 0; i < n; ++i) {
    const Tensor<float> cover = data.load_holdout(i);
    Rng rng(Rng::mix(cfg.seed, 0xE7A1, i));
    std::vector<std::uint8_t> bits(cfg.msg_bits);
    for (auto& b : bits) b = rng.next_below(2) ? 1 : 0;
    const BitMessage msg(bits, cfg.msg_groups);
    const auto m_in =
        broadcast<float>(encode_groups(msg), cover.shape.h, cover.shape.w);
    auto [z_hat, wm] = stack.embed(m_in, cover);
    (void)z_hat;
    Tape<float> t(false);
    const Tensor<float> wm_q = t.value(t.quantize_ste(t.constant(wm)));
    const auto z = Tensor<float>::constant(cover.shape.h, cover.shape.w,
                                           stack.msg_channels(), 0.5f);
    auto [m_out, rec] = stack.extract(z, wm_q);
    (void)rec;
    acc_sum += bit_accuracy(msg, decode_message(m_out, cfg.msg_bits, cfg.msg_groups));
    const double p = psnr(cover, wm_q);
    if (!std::isinf(p)) {
      psnr_sum += p;
      ++psnr_n;
    }
  }
  HoldoutScore s;
  s.acc = acc_sum / n;
  s.psnr_db = psnr_n > 0 ? psnr_sum / psnr_n
                         : std::numeric_limits<double>::infinity();
  return s;
}

}  // namespace detail

// End-to-end training: per step, sample a batch and an attack, run the
// embed/quantize/attack/extract pipeline per item with per-item seeds,
// average gradients in item order and take one Adam step. Fully
// reproducible from cfg.seed.
inline TrainResult train(const TrainConfig& cfg, const Dataset& data,
                         const std::string& checkpoint_path = "",
                         std::ostream* live_log = nullptr,
                         const CouplingStack<float>* resume_from = nullptr,
                         std::int64_t start_step = 0) {
  cfg.validate();
  TrainResult result;
  result.stack = resume_from
                     ? *resume_from
                     : CouplingStack<float>(cfg.blocks, cfg.msg_groups, cfg.hidden,
                                            static_cast<float>(cfg.clamp));
  if (!resume_from) result.stack.init_train(cfg.seed);
  auto& stack = result.stack;

  AdamState<float> adam = AdamState<float>::init(stack.params());
  const bool identity_only = cfg.noise.is_identity_only();
  TrainStage stage = TrainStage::Robustness;
  std::int64_t stage_started = start_step;
  std::vector<double> acc_history;

  std::ostringstream log;
  auto emit = [&](const std::string& line) {
    log << line << "\n";
    if (live_log) (*live_log) << line << "\n" << std::flush;
  };

  const nlohmann::json cfg_json = cfg;
  Checkpoint meta;
  meta.blocks = static_cast<std::uint32_t>(cfg.blocks);
  meta.msg_channels = static_cast<std::uint32_t>(cfg.msg_groups);
  meta.hidden = static_cast<std::uint32_t>(cfg.hidden);
  meta.clamp_lambda = static_cast<float>(cfg.clamp);
  meta.config_json = cfg_json.dump();

  auto save = [&](std::int64_t step) {
    if (checkpoint_path.empty()) return;
    meta.step = static_cast<std::uint64_t>(step);
    save_checkpoint(checkpoint_path, stack, meta);
  };

  bool stop = false;
  std::int64_t step = start_step;
  for (; step < start_step + cfg.max_steps && !stop; ++step) {
    const NoiseSpec batch_spec =
        sample_noise(cfg.noise, Rng::mix(cfg.seed, 0xA77A, step));
    const double omega_w = omega_w_schedule(stage, identity_only);
    LossWeights<float> weights;
    weights.w_w = static_cast<float>(omega_w);

    std::vector<detail::ItemOutcome> outcomes(cfg.batch);
    std::exception_ptr item_error = nullptr;
#pragma omp parallel for schedule(static) num_threads(std::min(cfg.batch, omp_get_max_threads()))
    for (int i = 0; i < cfg.batch; ++i) {
      try {
        const std::uint64_t item_seed = Rng::mix(cfg.seed, step, i);
        const Tensor<float> cover =
            data.sample_training_item(Rng::mix(item_seed, 1));
        Rng msg_rng(Rng::mix(item_seed, 2));
        std::vector<std::uint8_t> bits(cfg.msg_bits);
        for (auto& b : bits) b = msg_rng.next_below(2) ? 1 : 0;
        const BitMessage msg(bits, cfg.msg_groups);
        NoiseSpec item_spec = batch_spec;
        item_spec.seed = Rng::mix(batch_spec.seed, i);
        outcomes[i] = detail::run_item(stack, cover, msg, item_spec, weights);
      } catch (...) {
#pragma omp critical
        if (!item_error) item_error = std::current_exception();
      }
    }
    if (item_error) std::rethrow_exception(item_error);

    // Deterministic aggregation: mean over items in index order.
    stack.zero_grads();
    auto& params = stack.params();
    const float inv_b = 1.0f / static_cast<float>(cfg.batch);
    for (int i = 0; i < cfg.batch; ++i)
      for (std::size_t pi = 0; pi < params.size(); ++pi) {
        const auto& g = outcomes[i].grads[pi];
        for (std::size_t j = 0; j < g.size(); ++j)
          params[pi].grad[j] += inv_b * g[j];
      }

    double l_w = 0, l_m = 0, l_z = 0, l_c = 0, l_total = 0, acc = 0;
    for (const auto& o : outcomes) {
      l_w += o.l_w;
      l_m += o.l_m;
      l_z += o.l_z;
      l_c += o.l_c;
      l_total += o.l_total;
      acc += o.acc;
    }
    l_w /= cfg.batch;
    l_m /= cfg.batch;
    l_z /= cfg.batch;
    l_c /= cfg.batch;
    l_total /= cfg.batch;
    acc /= cfg.batch;

    if (!std::isfinite(l_total)) {
      emit("incident step=" + std::to_string(step + 1) +
           " non-finite loss; aborting with last saved checkpoint");
      result.aborted = true;
      break;
    }

    if (!adam_step(params, adam, static_cast<float>(cfg.lr)))
      emit("incident step=" + std::to_string(step + 1) +
           " non-finite gradient; step rejected");

    char line[320];
    std::snprintf(line, sizeof(line),
                  "step=%lld noise=%s l_w=%.6e l_m=%.6e l_z=%.6e l_c=%.6e "
                  "l_total=%.6e omega_w=%.3f stage=%s acc=%.4f",
                  static_cast<long long>(step + 1), noise_kind_name(batch_spec.kind),
                  l_w, l_m, l_z, l_c, l_total, omega_w, stage_name(stage), acc);
    emit(line);

    // Stage switch on plateaued windowed accuracy.
    acc_history.push_back(acc);
    if (!identity_only && stage == TrainStage::Robustness) {
      const std::int64_t in_stage = step + 1 - stage_started;
      bool do_switch = false;
      if (in_stage >= cfg.stage_max_steps) do_switch = true;
      if (in_stage >= std::max(cfg.stage_min_steps, 2 * cfg.stage_window) &&
          acc_history.size() >= static_cast<std::size_t>(2 * cfg.stage_window)) {
        const std::size_t n = acc_history.size();
        double recent = 0, previous = 0;
        for (int k = 0; k < cfg.stage_window; ++k) {
          recent += acc_history[n - 1 - k];
          previous += acc_history[n - 1 - cfg.stage_window - k];
        }
        recent /= cfg.stage_window;
        previous /= cfg.stage_window;
        if (recent - previous < cfg.stage_min_improve) do_switch = true;
      }
      if (do_switch) {
        stage = TrainStage::Imperceptibility;
        stage_started = step + 1;
        emit("stage_switch step=" + std::to_string(step + 1) +
             " stage=imperceptibility");
      }
    }

    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0)
      save(step + 1);

    if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
      const auto score = detail::eval_holdout(stack, data, cfg);
      result.final_holdout_acc = score.acc;
      result.final_holdout_psnr = score.psnr_db;
      char eline[160];
      std::snprintf(eline, sizeof(eline),
                    "eval step=%lld holdout_acc=%.4f holdout_psnr=%.2f",
                    static_cast<long long>(step + 1), score.acc,
                    std::isinf(score.psnr_db) ? 999.0 : score.psnr_db);
      emit(eline);
      if (cfg.stop_acc > 0 && score.acc >= cfg.stop_acc &&
          score.psnr_db >= cfg.stop_psnr) {
        emit("early_stop step=" + std::to_string(step + 1));
        stop = true;
      }
    }
  }

  result.steps_run = step - start_step + (stop ? 1 : 0);
  if (stop) result.steps_run = step + 1 - start_step;
  if (!result.aborted) save(stop ? step + 1 : step);
  result.metric_log = log.str();
  meta.step = static_cast<std::uint64_t>(stop ? step + 1 : step);
  result.meta = meta;
  return result;
}

}  // namespace iwn
