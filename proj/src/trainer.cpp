#include "psumml/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "psumml/errors.hpp"
#include "psumml/metrics.hpp"

namespace psumml {

namespace {

using kernels::default_backend;

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

void train_phase_d(TrainState& st, const TrainBatch& batch_a, const TrainBatch& batch_b,
                   TrainLogRecord& rec) {
  const auto be = default_backend();
  SegNet<float>::Cache cache_a, cache_b;
  st.model.forward(batch_a.images, kModalityA, /*train=*/true, cache_a, st.ws, be);
  st.model.forward(batch_b.images, kModalityB, /*train=*/true, cache_b, st.ws, be);

  for (int guard = 0; guard < 2; ++guard) {
    if (!st.disc_exists[guard]) continue;
    const int other = 1 - guard;
    const SegNet<float>::Cache& cg = (guard == kModalityA) ? cache_a : cache_b;
    const SegNet<float>::Cache& co = (other == kModalityA) ? cache_a : cache_b;

    const Tensor<float> t_other = dpca_disc_targets(co.probs, guard, other, st.scenario);
    const Tensor<float> t_guard = dpca_disc_targets(cg.probs, guard, guard, st.scenario);

    Discriminator<float>::Cache dc_other, dc_guard;
    st.disc[guard].forward(co.feat, dc_other, st.ws, be);
    st.disc[guard].forward(cg.feat, dc_guard, st.ws, be);

    Tensor<float> dd_other(dc_other.probs.n, dc_other.probs.c, dc_other.probs.h,
                           dc_other.probs.w);
    Tensor<float> dd_guard(dc_guard.probs.n, dc_guard.probs.c, dc_guard.probs.h,
                           dc_guard.probs.w);
    const LossValue lv =
        dpca_discriminator_loss(st.scenario, guard, &dc_other.probs, &t_other, &dc_guard.probs,
                                &t_guard, &dd_other, &dd_guard);
    (guard == kModalityA ? rec.d_a : rec.d_b) = lv.value;
    if (!std::isfinite(lv.value))
      throw TrainingError("non-finite discriminator loss, guard " + std::to_string(guard));

    st.disc[guard].zero_grads();
    st.disc[guard].backward(dc_other, dd_other, /*need_dx=*/false, /*accum_params=*/true,
                            nullptr, st.ws, be);
    st.disc[guard].backward(dc_guard, dd_guard, false, true, nullptr, st.ws, be);
    st.opt_disc[guard].step(st.disc[guard].params());
  }
}

void train_phase_s(TrainState& st, const TrainBatch& batch_a, const TrainBatch& batch_b,
                   int step, TrainLogRecord& rec) {
  const auto be = default_backend();
  const bool sest_active = st.cfg.sest_enabled && step > st.tk && st.store.full() &&
                           batch_a.has_psl && batch_b.has_psl;

  SegNet<float>::Cache cache[2];
  st.model.forward(batch_a.images, kModalityA, /*train=*/true, cache[0], st.ws, be);
  st.model.forward(batch_b.images, kModalityB, /*train=*/true, cache[1], st.ws, be);

  LossParts parts;
  Tensor<float> dprobs[2];
  for (int m = 0; m < 2; ++m)
    dprobs[m] = Tensor<float>(cache[m].probs.n, cache[m].probs.c, cache[m].probs.h,
                              cache[m].probs.w);

  const TrainBatch* batches[2] = {&batch_a, &batch_b};
  double pcl_sum = 0.0, sest_sum = 0.0;
  long long pcl_pix = 0, sest_pix = 0;
  for (int m = 0; m < 2; ++m) {
    const LossValue pcl = pcl_loss(cache[m].probs, batches[m]->partial, st.scenario, m,
                                   &dprobs[m]);
    pcl_sum += pcl.value;
    pcl_pix += pcl.pixel_count;
    if (sest_active) {
      const Tensor<float> p_mod = st.cfg.modulation_enabled
                                      ? modulate(cache[m].probs, batches[m]->psl)
                                      : batches[m]->psl;
      const PseudoLabelBatch pseudo =
          assign_pseudo(p_mod, batches[m]->partial, st.scenario, m, st.cfg.tau);
      const LossValue sv = sest_loss(cache[m].probs, pseudo, st.scenario, m, &dprobs[m]);
      sest_sum += sv.value;
      sest_pix += sv.pixel_count;
    }
  }
  parts.pcl = {pcl_sum, pcl_pix};
  parts.sest = {sest_sum, sest_pix};

  // Adversarial encoder terms: push guard-modality features toward the
  // cross-modality half of the (frozen) discriminator.
  Tensor<float> dfeat[2];
  bool has_dfeat[2] = {false, false};
  for (int guard = 0; guard < 2; ++guard) {
    LossValue enc{0.0, 0};
    if (st.disc_exists[guard]) {
      const Tensor<float> flipped =
          dpca_disc_targets(cache[guard].probs, guard, 1 - guard, st.scenario);
      Discriminator<float>::Cache dc;
      st.disc[guard].forward(cache[guard].feat, dc, st.ws, be);
      Tensor<float> dd(dc.probs.n, dc.probs.c, dc.probs.h, dc.probs.w);
      enc = dpca_encoder_loss(st.scenario, guard, &dc.probs, &flipped, &dd);
      const float lam = static_cast<float>(st.cfg.lambda_dpca);
      for (auto& g : dd.v) g *= lam;
      st.disc[guard].backward(dc, dd, /*need_dx=*/true, /*accum_params=*/false, &dfeat[guard],
                              st.ws, be);
      has_dfeat[guard] = true;
    }
    (guard == kModalityA ? parts.dpca_enc_a : parts.dpca_enc_b) = enc;
  }

  LossWeights weights;
  weights.lambda_dpca = st.cfg.lambda_dpca;
  weights.sest_enabled = sest_active;
  const LossValue total = total_loss(parts, weights);

  st.model.zero_grads();
  st.model.backward(cache[0], dprobs[0], has_dfeat[0] ? &dfeat[0] : nullptr, st.ws, be);
  st.model.backward(cache[1], dprobs[1], has_dfeat[1] ? &dfeat[1] : nullptr, st.ws, be);
  st.opt_seg.step(st.model.params());

  rec.pcl = parts.pcl.value;
  rec.dpca_a = parts.dpca_enc_a.value;
  rec.dpca_b = parts.dpca_enc_b.value;
  rec.sest = parts.sest.value;
  rec.total = total.value;
}

namespace {

// Stateless batch schedule: step s (1-based) maps to an epoch and a slot so a
// resumed run continues the identical sample order.
std::vector<int> batch_indices(std::uint64_t seed, const char* purpose, int n, int batch,
                               int step) {
  const int steps_per_epoch = std::max(1, n / batch);
  const int epoch = (step - 1) / steps_per_epoch;
  const int slot = (step - 1) % steps_per_epoch;
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  rng::Stream rs = rng::derive(seed, purpose, static_cast<std::uint64_t>(epoch));
  rs.shuffle(order);
  std::vector<int> out;
  for (int i = 0; i < batch; ++i) out.push_back(order[(slot * batch + i) % n]);
  return out;
}

Checkpoint state_to_checkpoint(TrainState& st, int step) {
  Checkpoint ck;
  ck.scenario = st.scenario;
  ck.seg_cfg = st.model.cfg;
  ck.step = step;
  ck.model = st.model;
  for (int m = 0; m < 2; ++m) {
    ck.disc_exists[m] = st.disc_exists[m];
    ck.disc_cfg[m] = st.disc[m].cfg;
    if (st.disc_exists[m]) ck.disc[m] = st.disc[m];
    ck.vel_disc[m] = st.opt_disc[m].velocity;
  }
  ck.vel_seg = st.opt_seg.velocity;
  ck.store = st.store;
  ck.config_echo = {{"total_steps", st.cfg.total_steps},
                    {"batch_size", st.cfg.batch_size},
                    {"lambda_dpca", st.cfg.lambda_dpca},
                    {"k_snapshots", st.cfg.k_snapshots},
                    {"seed", st.cfg.seed}};
  return ck;
}

}  // namespace

void TrainConfig::validate() const {
  if (total_steps < 1) throw ConfigError("train: total_steps must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr_seg > 0.0 && lr_disc > 0.0)) throw ConfigError("train: learning rates must be > 0");
  if (!(t0_frac > 0.0 && t0_frac < tk_frac && tk_frac < 1.0))
    throw ConfigError("train: need 0 < t0_frac < tk_frac < 1");
  if (lambda_dpca < 0.0) throw ConfigError("train: lambda_dpca must be >= 0");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("train: tau must be in (0,1]");
  if (k_snapshots < 1) throw ConfigError("train: k_snapshots must be >= 1");
}

TrainState make_train_state(const ScenarioSpec& scenario, const TrainConfig& cfg) {
  cfg.validate();
  TrainState st;
  st.scenario = scenario;
  st.cfg = cfg;

  SegNetConfig sc;
  sc.in_channels = 1;
  sc.base_width = cfg.base_width;
  sc.num_classes = scenario.num_classes();
  st.model.configure(sc);
  st.model.init(cfg.seed);

  for (int m = 0; m < 2; ++m) {
    // A discriminator exists only where there is a non-empty complement to
    // adapt (and the variant trains DPCA at all).
    if (!cfg.dpca_enabled || scenario.complement_empty(m)) continue;
    DiscriminatorConfig dc;
    dc.in_channels = cfg.base_width;
    dc.width = cfg.disc_width;
    const int mm = static_cast<int>(scenario.modality(m).organ_count());
    dc.out_channels = 2 * (scenario.num_classes() - mm);
    dc.stride = cfg.disc_stride;
    st.disc[m].configure(dc);
    st.disc[m].init(cfg.seed, m);
    st.disc_exists[m] = true;
  }

  st.opt_seg.lr = static_cast<float>(cfg.lr_seg);
  st.opt_seg.mu = static_cast<float>(cfg.momentum);
  for (int m = 0; m < 2; ++m) {
    st.opt_disc[m].lr = static_cast<float>(cfg.lr_disc);
    st.opt_disc[m].mu = static_cast<float>(cfg.momentum);
  }

  st.t0 = static_cast<int>(std::llround(cfg.t0_frac * cfg.total_steps));
  st.tk = static_cast<int>(std::llround(cfg.tk_frac * cfg.total_steps));
  st.store.k = cfg.k_snapshots;
  st.store.t0 = st.t0;
  st.store.tk = st.tk;
  if (cfg.sest_enabled && st.tk > st.t0)
    st.snap_times = snapshot_times(st.t0, st.tk, cfg.k_snapshots);
  return st;
}

TrainLogRecord train_step(TrainState& st, const TrainBatch& batch_a, const TrainBatch& batch_b,
                          int step) {
  const double start = now_ms();
  TrainLogRecord rec;
  rec.step = step;
  try {
    if (st.cfg.dpca_enabled) train_phase_d(st, batch_a, batch_b, rec);
    train_phase_s(st, batch_a, batch_b, step, rec);
  } catch (const TrainingError& e) {
    throw TrainingError("step " + std::to_string(step) + ": " + e.what());
  }
  rec.wall_ms = now_ms() - start;
  return rec;
}

TrainBatch make_batch(const std::vector<SampleRecord>& samples, const std::vector<int>& indices,
                      const std::vector<Tensor<float>>* psl_cache) {
  TrainBatch b;
  const int n = static_cast<int>(indices.size());
  const int h = samples.at(0).h, w = samples.at(0).w;
  b.images = Tensor<float>(n, 1, h, w);
  b.partial = MaskBatch(n, h, w);
  for (int i = 0; i < n; ++i) {
    const SampleRecord& s = samples[indices[i]];
    std::copy(s.image.begin(), s.image.end(), b.images.plane(i, 0));
    std::copy(s.partial_mask.v.begin(), s.partial_mask.v.end(), b.partial.plane(i));
  }
  if (psl_cache) {
    const Tensor<float>& first = psl_cache->at(indices[0]);
    b.psl = Tensor<float>(n, first.c, h, w);
    const std::size_t sz = static_cast<std::size_t>(first.c) * h * w;
    for (int i = 0; i < n; ++i) {
      const Tensor<float>& p = psl_cache->at(indices[i]);
      std::copy(p.v.begin(), p.v.end(), b.psl.v.begin() + sz * i);
    }
    b.has_psl = true;
  }
  return b;
}

TrainResult train(const Dataset& dataset, const TrainConfig& cfg,
                  const std::optional<std::filesystem::path>& resume_from) {
  cfg.validate();
  TrainResult result;
  result.state = make_train_state(dataset.manifest.scenario, cfg);
  TrainState& st = result.state;

  int start_step = 0;
  if (resume_from) {
    Checkpoint ck = load_checkpoint(*resume_from);
    if (!(ck.scenario.modality_a == st.scenario.modality_a &&
          ck.scenario.modality_b == st.scenario.modality_b))
      throw TrainingError("resume: checkpoint scenario does not match dataset");
    st.model = ck.model;
    for (int m = 0; m < 2; ++m) {
      if (ck.disc_exists[m] != st.disc_exists[m])
        throw TrainingError("resume: discriminator layout mismatch");
      if (ck.disc_exists[m]) st.disc[m] = ck.disc[m];
      st.opt_disc[m].velocity = ck.vel_disc[m];
    }
    st.opt_seg.velocity = ck.vel_seg;
    st.store = ck.store;
    start_step = ck.step;
  }

  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw IoError("cannot create out dir: " + cfg.out_dir.string());
  std::ofstream log_out(cfg.out_dir / "train_log.jsonl",
                        start_step == 0 ? std::ios::trunc : std::ios::app);
  if (!log_out) throw IoError("cannot open train log in " + cfg.out_dir.string());

  const int na = static_cast<int>(dataset.train[0].size());
  const int nb = static_cast<int>(dataset.train[1].size());
  if (na < 1 || nb < 1) throw TrainingError("train: empty training split");

  // Ensembled soft labels, computed once when the snapshot store fills.
  std::vector<Tensor<float>> psl[2];
  auto compute_psl = [&]() {
    for (int m = 0; m < 2; ++m) {
      const auto& samples = dataset.train[m];
      psl[m].resize(samples.size());
      for (std::size_t i = 0; i < samples.size(); ++i) {
        Tensor<float> x(1, 1, samples[i].h, samples[i].w);
        std::copy(samples[i].image.begin(), samples[i].image.end(), x.data());
        psl[m][i] = ensemble_soft_label(st.store, x, m, st.ws, kernels::default_backend());
      }
    }
  };
  if (st.cfg.sest_enabled && st.store.full()) compute_psl();

  std::size_t next_snap = 0;
  while (next_snap < st.snap_times.size() && st.snap_times[next_snap] <= start_step) ++next_snap;

  for (int step = start_step + 1; step <= cfg.total_steps; ++step) {
    const bool psl_ready = st.cfg.sest_enabled && st.store.full() && !psl[0].empty();
    const TrainBatch batch_a =
        make_batch(dataset.train[0], batch_indices(cfg.seed, "batch_a", na, cfg.batch_size, step),
                   psl_ready ? &psl[0] : nullptr);
    const TrainBatch batch_b =
        make_batch(dataset.train[1], batch_indices(cfg.seed, "batch_b", nb, cfg.batch_size, step),
                   psl_ready ? &psl[1] : nullptr);

    TrainLogRecord rec;
    try {
      rec = train_step(st, batch_a, batch_b, step);
    } catch (const TrainingError& e) {
      log_out << "{\"step\":" << step << ",\"error\":\"" << e.what() << "\"}\n";
      log_out.flush();
      throw;
    }

    if (st.cfg.sest_enabled && next_snap < st.snap_times.size() &&
        step == st.snap_times[next_snap]) {
      st.store.add(step, st.model);
      ++next_snap;
      if (st.store.full()) compute_psl();
    }

    if (cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.total_steps)) {
      const MetricsReport rep = evaluate(st.model, dataset.test[0], dataset.test[1],
                                         st.scenario, 1.0);
      rec.evaluated = true;
      rec.val_dice_a = rep.mean_dice[0];
      rec.val_dice_b = rep.mean_dice[1];
      Checkpoint ck = state_to_checkpoint(st, step);
      save_checkpoint(cfg.out_dir / ("ckpt_" + std::to_string(step)), ck);
    }

    log_out << log_record_to_json(rec) << "\n";
    result.logs.push_back(rec);
  }
  log_out.flush();

  result.final_checkpoint = cfg.out_dir / ("ckpt_" + std::to_string(cfg.total_steps));
  if (!std::filesystem::exists(result.final_checkpoint)) {
    Checkpoint ck = state_to_checkpoint(st, cfg.total_steps);
    save_checkpoint(result.final_checkpoint, ck);
  }
  return result;
}

std::string log_record_to_json(const TrainLogRecord& rec) {
  nlohmann::json j;
  j["step"] = rec.step;
  j["pcl"] = rec.pcl;
  j["dpca_a"] = rec.dpca_a;
  j["dpca_b"] = rec.dpca_b;
  j["d_a"] = rec.d_a;
  j["d_b"] = rec.d_b;
  j["sest"] = rec.sest;
  j["total"] = rec.total;
  if (rec.evaluated) {
    j["val_dice_a"] = rec.val_dice_a;
    j["val_dice_b"] = rec.val_dice_b;
  }
  j["wall_ms"] = rec.wall_ms;
  return j.dump();
}

std::vector<AblationRow> ablation_suite(const Dataset& dataset, const TrainConfig& base_cfg) {
  struct Variant {
    std::string name;
    std::string dir;
    bool dpca, sest, modulation;
    int k;
  };
  const std::vector<Variant> variants = {
      {"PCL", "pcl", false, false, true, base_cfg.k_snapshots},
      {"+DPCA", "dpca", true, false, true, base_cfg.k_snapshots},
      {"DEST [K=4] W/o Mod.", "dest_k4_nomod", true, true, false, 4},
      {"DEST [K=1]", "dest_k1", true, true, true, 1},
      {"DEST [K=2]", "dest_k2", true, true, true, 2},
      {"DEST [K=4]", "dest_k4", true, true, true, 4},
      {"DEST [K=8]", "dest_k8", true, true, true, 8},
  };

  std::vector<AblationRow> rows;
  for (const Variant& v : variants) {
    AblationRow row;
    row.name = v.name;
    try {
      TrainConfig cfg = base_cfg;
      cfg.dpca_enabled = v.dpca;
      cfg.sest_enabled = v.sest;
      cfg.modulation_enabled = v.modulation;
      cfg.k_snapshots = v.k;
      cfg.out_dir = base_cfg.out_dir / v.dir;
      TrainResult res = train(dataset, cfg);
      const MetricsReport rep = evaluate(res.state.model, dataset.test[0], dataset.test[1],
                                         dataset.manifest.scenario, 1.0);
      row.dice_a = rep.mean_dice[0];
      row.dice_b = rep.mean_dice[1];
    } catch (const std::exception&) {
      row.failed = true;
    }
    rows.push_back(row);
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "variant,mri_dice,ct_dice\n";
  char buf[64];
  for (const AblationRow& r : rows) {
    if (r.failed) {
      out << r.name << ",FAILED,FAILED\n";
      continue;
    }
    std::snprintf(buf, sizeof(buf), "%.2f,%.2f", 100.0 * r.dice_a, 100.0 * r.dice_b);
    out << r.name << "," << buf << "\n";
  }
}

void write_ablation_markdown(const std::vector<AblationRow>& rows,
                             const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "| Method | Dice A (MRI analogue) | Dice B (CT analogue) |\n";
  out << "|---|---|---|\n";
  char buf[64];
  for (const AblationRow& r : rows) {
    if (r.failed) {
      out << "| " << r.name << " | FAILED | FAILED |\n";
      continue;
    }
    std::snprintf(buf, sizeof(buf), "%.2f | %.2f", 100.0 * r.dice_a, 100.0 * r.dice_b);
    out << "| " << r.name << " | " << buf << " |\n";
  }
}

}  // namespace psumml
