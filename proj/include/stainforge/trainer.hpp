#pragma once

#include <functional>
#include <ostream>
#include <vector>

#include "stainforge/codec.hpp"
#include "stainforge/data.hpp"
#include "stainforge/denoiser.hpp"
#include "stainforge/optim.hpp"
#include "stainforge/schedule.hpp"

namespace stainforge {

struct Stage1Config {
    int64_t steps = 4000;
    int batch = 2;  // source images per step; each expands to M marker items
    NoiseSpec noise{NoiseKind::multi_resolution, 0, 0.5};
    AdamConfig opt;
    uint64_t seed = 0;
    int64_t checkpoint_every = 0;  // 0: final checkpoint only
};

struct Stage2Config {
    int64_t steps = 1000;
    int batch = 2;
    double lambda = 0.5;
    double marker_subsample_rate = 1.0;
    bool zero_z_input = true;  // feed an all-zero target latent at t = T
    AdamConfig opt;
    uint64_t seed = 0;
    int64_t checkpoint_every = 0;
};

struct TrainStepRecord {
    int64_t step = 0;
    double loss = 0;
    std::vector<double> per_marker;
    double lr = 0;
    double wall_ms = 0;
};

struct TrainLog {
    std::vector<std::string> marker_names;
    std::vector<TrainStepRecord> steps;

    static void write_line(std::ostream& os, const TrainStepRecord& rec,
                           const std::vector<std::string>& names) {
        os << "step=" << rec.step << " loss=" << rec.loss << " lr=" << rec.lr
           << " wall_ms=" << rec.wall_ms;
        for (size_t m = 0; m < rec.per_marker.size() && m < names.size(); ++m)
            os << " loss[" << names[m] << "]=" << rec.per_marker[m];
        os << "\n";
    }
};

// Frozen-codec latents precomputed once per run.
template <class T>
struct LatentCache {
    std::vector<Tensor<T>> source;                   // x per record
    std::vector<std::vector<Tensor<T>>> markers;     // z0 per record, panel order
    std::vector<std::vector<Tensor<T>>> targets01;   // GT marker images, stage 2 only
};

template <class T>
LatentCache<T> build_latent_cache(const std::vector<PatchRecord>& records,
                                  const MarkerPanel& panel, const Codec<T>& codec,
                                  bool with_targets) {
    LatentCache<T> cache;
    cache.source.reserve(records.size());
    for (const auto& rec : records) {
        cache.source.push_back(encode(codec, to_model_range(image_to_tensor<T>(rec.source))));
        std::vector<Tensor<T>> z0s;
        std::vector<Tensor<T>> targets;
        for (const auto& name : panel.names) {
            Tensor<T> im = image_to_tensor<T>(rec.marker(name));
            z0s.push_back(encode(codec, to_model_range(replicate_channels(im))));
            if (with_targets) targets.push_back(im);
        }
        cache.markers.push_back(std::move(z0s));
        if (with_targets) cache.targets01.push_back(std::move(targets));
    }
    return cache;
}

// ---------------------------------------------------------------------------
// Stage 1: latent v-prediction
// ---------------------------------------------------------------------------

// One source replicated across every marker of the panel; each (source,
// marker) pair draws its own timestep and noise field.
template <class T>
struct Stage1Item {
    Tensor<T> source_latent;
    std::vector<Tensor<T>> marker_latents;  // panel order
    std::vector<int> t;
    std::vector<Tensor<T>> eps;
};

// (1/M) sum_m ||v* - v_hat||^2, averaged over the batch; the norm is the
// per-element mean so the value matches the mean of M independently
// computed single-marker losses.
template <class T>
Tensor<T> stage1_loss(DenoiserParams<T>& params, const std::vector<Stage1Item<T>>& batch,
                      const MarkerPanel& panel, const NoiseSchedule& sched,
                      std::vector<double>* per_marker_out = nullptr) {
    const int M = panel.size();
    if (batch.empty()) throw DataError("stage1_loss: empty batch");
    std::vector<Tensor<T>> xs, zts, vstars;
    std::vector<int> ts;
    std::vector<MarkerCondition> conds;
    for (const auto& item : batch) {
        if (static_cast<int>(item.marker_latents.size()) != M ||
            static_cast<int>(item.t.size()) != M || static_cast<int>(item.eps.size()) != M)
            throw DataError("stage1_loss: item must carry one latent/t/eps per marker");
        for (int m = 0; m < M; ++m) {
            xs.push_back(item.source_latent);
            zts.push_back(forward_diffuse(item.marker_latents[m], item.t[m], item.eps[m], sched));
            vstars.push_back(v_target(item.marker_latents[m], item.eps[m], item.t[m], sched));
            ts.push_back(item.t[m]);
            conds.push_back(MarkerCondition{m, M});
        }
    }
    Tensor<T> x = stack0(xs);
    Tensor<T> zt = stack0(zts);
    Tensor<T> vstar = stack0(vstars);
    Tensor<T> vhat = denoiser_forward_batch(params, x, zt, ts, conds);
    Tensor<T> sq = square(sub(vhat, vstar));

    if (per_marker_out) {
        per_marker_out->assign(M, 0.0);
        const int64_t per_item = sq.numel() / static_cast<int64_t>(ts.size());
        std::vector<int> counts(M, 0);
        for (size_t n = 0; n < ts.size(); ++n) {
            double acc = 0;
            for (int64_t i = 0; i < per_item; ++i)
                acc += static_cast<double>(sq.raw()[n * per_item + i]);
            (*per_marker_out)[conds[n].marker_index] += acc / per_item;
            counts[conds[n].marker_index] += 1;
        }
        for (int m = 0; m < M; ++m)
            if (counts[m] > 0) (*per_marker_out)[m] /= counts[m];
    }
    return reduce_mean(sq);
}

template <class T>
TrainLog stage1_train(const Stage1Config& cfg, const NoiseSchedule& sched,
                      const std::vector<PatchRecord>& records, const MarkerPanel& panel,
                      const Codec<T>& codec, DenoiserParams<T>& params, Adam<T>& opt,
                      int64_t start_step = 0,
                      const std::function<void(int64_t)>& on_checkpoint = {},
                      std::ostream* log_stream = nullptr) {
    if (!codec.frozen) throw DataError("stage1_train: codec must be frozen");
    if (!codec.trained) throw DataError("stage1_train: codec is flagged unusable (not pretrained)");
    if (records.empty()) throw DataError("stage1_train: no training records");
    panel.validate();

    LatentCache<T> cache = build_latent_cache(records, panel, codec, false);
    const int M = panel.size();
    const Shape& lshape = cache.markers[0][0].shape();
    Rng base(cfg.seed);

    TrainLog log;
    log.marker_names = panel.names;
    for (int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        double t0 = now_ms();
        Rng rng = base.derive(static_cast<uint64_t>(step));
        std::vector<Stage1Item<T>> batch;
        for (int b = 0; b < cfg.batch; ++b) {
            int64_t idx = rng.uniform_int(static_cast<int64_t>(records.size()));
            Stage1Item<T> item;
            item.source_latent = cache.source[idx];
            item.marker_latents = cache.markers[idx];
            for (int m = 0; m < M; ++m) {
                item.t.push_back(1 + static_cast<int>(rng.uniform_int(sched.timesteps)));
                item.eps.push_back(sample_noise<T>(cfg.noise, lshape, rng.next_u64()));
            }
            batch.push_back(std::move(item));
        }

        TrainStepRecord rec;
        rec.step = step;
        Tape<T> tape;
        {
            typename Tape<T>::Scope scope(tape);
            Tensor<T> loss = stage1_loss(params, batch, panel, sched, &rec.per_marker);
            rec.loss = static_cast<double>(loss.item());
            if (!std::isfinite(rec.loss))
                throw NumericError("stage1_train: non-finite loss at step " +
                                   std::to_string(step));
            backward(loss);
        }
        opt.step();
        opt.zero_grad();

        rec.lr = opt.current_lr();
        rec.wall_ms = now_ms() - t0;
        if (log_stream) TrainLog::write_line(*log_stream, rec, log.marker_names);
        log.steps.push_back(std::move(rec));
        if (on_checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
            on_checkpoint(step);
    }
    return log;
}

// ---------------------------------------------------------------------------
// Stage 2: single-step pixel-level fine-tuning
// ---------------------------------------------------------------------------

template <class T>
struct Stage2Item {
    Tensor<T> source_latent;
    std::vector<int> marker_subset;    // marker indices included this step
    std::vector<Tensor<T>> targets01;  // GT [1,H,W] aligned with marker_subset
    std::vector<Tensor<T>> z0;         // only used by the alpha-scaled input variant
};

// Single-step path at t = T with a zero target-latent input: v_hat ->
// recover_z0 -> decode -> channel average, then (1-lambda) L1 + lambda L2
// against the ground-truth marker image. Gradients reach the denoiser
// through the frozen decoder.
template <class T>
Tensor<T> stage2_loss(DenoiserParams<T>& params, const Codec<T>& codec,
                      const std::vector<Stage2Item<T>>& batch, double lambda,
                      const MarkerPanel& panel, const NoiseSchedule& sched,
                      bool zero_z_input = true) {
    if (!codec.frozen) throw DataError("stage2_loss: codec must be frozen");
    if (lambda < 0.0 || lambda > 1.0) throw DataError("stage2_loss: lambda must be in [0,1]");
    if (batch.empty()) throw DataError("stage2_loss: empty batch");

    const int M = panel.size();
    const int T_final = sched.timesteps;
    const double ab_T = sched.alpha_bar(T_final);
    std::vector<Tensor<T>> xs, zins, targets;
    std::vector<int> ts;
    std::vector<MarkerCondition> conds;
    for (const auto& item : batch) {
        if (item.marker_subset.size() != item.targets01.size())
            throw DataError("stage2_loss: marker subset and targets misaligned");
        for (size_t k = 0; k < item.marker_subset.size(); ++k) {
            int m = item.marker_subset[k];
            if (m < 0 || m >= M) throw DataError("stage2_loss: marker index out of panel");
            xs.push_back(item.source_latent);
            if (zero_z_input) {
                zins.push_back(Tensor<T>::zeros(item.source_latent.shape()));
            } else {
                if (item.z0.size() != item.marker_subset.size())
                    throw DataError("stage2_loss: alpha-scaled input needs z0 latents");
                zins.push_back(scale(item.z0[k], static_cast<T>(std::sqrt(ab_T))));
            }
            targets.push_back(item.targets01[k]);
            ts.push_back(T_final);
            conds.push_back(MarkerCondition{m, M});
        }
    }

    Tensor<T> x = stack0(xs);
    Tensor<T> zin = stack0(zins);
    Tensor<T> vhat = denoiser_forward_batch(params, x, zin, ts, conds);
    Tensor<T> z0hat = recover_z0(zin, vhat, T_final, sched);
    Tensor<T> img = to_image_range(decode_batch(codec, z0hat));
    Tensor<T> pred = average_channels(img);  // [N,1,H,W]
    Tensor<T> gt = stack0(targets);
    Tensor<T> diff = sub(pred, gt);
    Tensor<T> l1 = reduce_mean(abs(diff));
    Tensor<T> l2 = reduce_mean(square(diff));
    return add(scale(l1, static_cast<T>(1.0 - lambda)), scale(l2, static_cast<T>(lambda)));
}

template <class T>
TrainLog stage2_finetune(const Stage2Config& cfg, const NoiseSchedule& sched,
                         const std::vector<PatchRecord>& records, const MarkerPanel& panel,
                         const Codec<T>& codec, DenoiserParams<T>& params, Adam<T>& opt,
                         int64_t start_step = 0,
                         const std::function<void(int64_t)>& on_checkpoint = {},
                         std::ostream* log_stream = nullptr) {
    if (!codec.frozen) throw DataError("stage2_finetune: codec must be frozen");
    if (!codec.trained) throw DataError("stage2_finetune: codec is flagged unusable");
    if (records.empty()) throw DataError("stage2_finetune: no training records");
    if (cfg.marker_subsample_rate <= 0.0 || cfg.marker_subsample_rate > 1.0)
        throw DataError("stage2_finetune: marker subsample rate must be in (0,1]");
    panel.validate();

    LatentCache<T> cache = build_latent_cache(records, panel, codec, true);
    const int M = panel.size();
    const int subset_size =
        std::max(1, std::min(M, static_cast<int>(std::lround(cfg.marker_subsample_rate * M))));
    Rng base(cfg.seed);

    TrainLog log;
    log.marker_names = panel.names;
    for (int64_t step = start_step + 1; step <= cfg.steps; ++step) {
        double t0 = now_ms();
        Rng rng = base.derive(static_cast<uint64_t>(step));
        std::vector<Stage2Item<T>> batch;
        for (int b = 0; b < cfg.batch; ++b) {
            int64_t idx = rng.uniform_int(static_cast<int64_t>(records.size()));
            Stage2Item<T> item;
            item.source_latent = cache.source[idx];
            std::vector<int> order(M);
            for (int m = 0; m < M; ++m) order[m] = m;
            if (subset_size < M) {
                for (int m = 0; m < subset_size; ++m) {
                    int j = m + static_cast<int>(rng.uniform_int(M - m));
                    std::swap(order[m], order[j]);
                }
            }
            for (int k = 0; k < subset_size; ++k) {
                int m = order[k];
                item.marker_subset.push_back(m);
                item.targets01.push_back(cache.targets01[idx][m]);
                if (!cfg.zero_z_input) item.z0.push_back(cache.markers[idx][m]);
            }
            batch.push_back(std::move(item));
        }

        TrainStepRecord rec;
        rec.step = step;
        Tape<T> tape;
        {
            typename Tape<T>::Scope scope(tape);
            Tensor<T> loss =
                stage2_loss(params, codec, batch, cfg.lambda, panel, sched, cfg.zero_z_input);
            rec.loss = static_cast<double>(loss.item());
            if (!std::isfinite(rec.loss))
                throw NumericError("stage2_finetune: non-finite loss at step " +
                                   std::to_string(step));
            backward(loss);
        }
        opt.step();
        opt.zero_grad();

        rec.lr = opt.current_lr();
        rec.wall_ms = now_ms() - t0;
        if (log_stream) TrainLog::write_line(*log_stream, rec, log.marker_names);
        log.steps.push_back(std::move(rec));
        if (on_checkpoint && cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
            on_checkpoint(step);
    }
    return log;
}

}  // namespace stainforge
