#include "ctrecon/training.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "ctrecon/evaluation.hpp"
#include "ctrecon/losses.hpp"
#include "ctrecon/rng.hpp"

namespace fs = std::filesystem;

namespace ctrecon {

namespace {

void shuffle_indices(std::vector<size_t>& idx, Rng& rng) {
  for (size_t i = idx.size(); i > 1; --i)
    std::swap(idx[i - 1], idx[size_t(rng.uniform_int(0, int64_t(i) - 1))]);
}

// One Adam state per named parameter, stepped in declaration order.
struct ParamOptimizer {
  std::vector<AdamState> states;
};

ParamOptimizer make_param_optimizer(const std::vector<NamedParam>& params, double lr, double beta1,
                                    double beta2) {
  ParamOptimizer opt;
  for (const auto& p : params) opt.states.push_back(make_adam_state(p.tensor.numel(), lr, beta1, beta2));
  return opt;
}

void optimizer_step(ParamOptimizer& opt, std::vector<NamedParam>& params) {
  for (size_t i = 0; i < params.size(); ++i) adam_step(opt.states[i], params[i].tensor);
}

void zero_grads(std::vector<NamedParam>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

void require_grids_match(const CorpusManifest& m, const RunConfig& cfg, const char* stage) {
  if (m.grid_n != cfg.corpus.grid_n || m.depth != cfg.corpus.depth ||
      m.voxel_pitch_mm != cfg.corpus.voxel_pitch_mm)
    throw std::invalid_argument(std::string(stage) + ": corpus manifest grid (" +
                                std::to_string(m.grid_n) + "^2 x " + std::to_string(m.depth) +
                                ") does not match the run config");
}

double heldout_foreground_dsc(const SegNet& seg, const std::vector<TrainingSample>& samples) {
  double acc = 0.0;
  for (const auto& s : samples) {
    LabelMask pred = onehot_to_mask(seg.forward(s.y).detach());
    for (uint8_t organ : {kLabelLung, kLabelLiver, kLabelBone})
      acc += dsc(pred, s.mask, organ);
  }
  return acc / (3.0 * double(samples.size()));
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Appends "opt.<name>.m" / "opt.<name>.v" tensors for every parameter.
void append_optimizer_tensors(std::vector<NamedParam>& out, const std::vector<NamedParam>& params,
                              const ParamOptimizer& opt) {
  for (size_t i = 0; i < params.size(); ++i) {
    const int64_t n = params[i].tensor.numel();
    std::vector<double> m = opt.states[i].m;
    std::vector<double> v = opt.states[i].v;
    out.push_back({"opt." + params[i].name + ".m", Tensor::from_data({n}, std::move(m))});
    out.push_back({"opt." + params[i].name + ".v", Tensor::from_data({n}, std::move(v))});
  }
}

void restore_optimizer_tensors(ParamOptimizer& opt, const std::vector<NamedParam>& params,
                               const std::map<std::string, const Tensor*>& by_name, int64_t t) {
  for (size_t i = 0; i < params.size(); ++i) {
    auto mi = by_name.find("opt." + params[i].name + ".m");
    auto vi = by_name.find("opt." + params[i].name + ".v");
    if (mi == by_name.end() || vi == by_name.end())
      throw std::runtime_error("checkpoint misses optimizer state for " + params[i].name);
    opt.states[i].m = mi->second->data();
    opt.states[i].v = vi->second->data();
    opt.states[i].t = t;
  }
}

int64_t meta_int(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw std::runtime_error("checkpoint meta misses " + key);
  return std::stoll(it->second);
}

uint64_t meta_u64(const std::map<std::string, std::string>& meta, const std::string& key) {
  auto it = meta.find(key);
  if (it == meta.end()) throw std::runtime_error("checkpoint meta misses " + key);
  return std::stoull(it->second);
}

}  // namespace

SegPretrainResult pretrain_segnet(const RunConfig& cfg) {
  validate_run_config(cfg);
  CorpusManifest manifest = load_manifest(cfg.manifest_path);
  require_grids_match(manifest, cfg, "pretrain_segnet");
  if (manifest.seg_train.empty() || manifest.seg_test.empty())
    throw std::invalid_argument("pretrain_segnet: segmentation corpus split is empty");

  // Everything is read (and thereby validated) before the first step.
  std::vector<TrainingSample> train, test;
  for (const auto& e : manifest.seg_train)
    train.push_back(load_training_sample(manifest, e, /*has_projections=*/false));
  for (const auto& e : manifest.seg_test)
    test.push_back(load_training_sample(manifest, e, /*has_projections=*/false));
  std::vector<Tensor> train_onehot;
  for (const auto& s : train) train_onehot.push_back(mask_to_onehot(s.mask));

  fs::create_directories(cfg.out_dir);
  SegNet seg(make_segnet_config(cfg));
  ParamOptimizer opt = make_param_optimizer(seg.parameters(), cfg.seg_lr, 0.9, 0.999);

  SegPretrainResult result;
  result.checkpoint_prefix = (fs::path(cfg.out_dir) / "seg_best").string();
  result.best_dsc = -1.0;

  std::vector<size_t> order(train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int64_t epoch = 0; epoch < cfg.seg_epochs; ++epoch) {
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(cfg.train_seed + 0x5e67u * uint64_t(epoch + 1));
    shuffle_indices(order, rng);
    for (size_t begin = 0; begin < order.size(); begin += size_t(cfg.batch_size)) {
      const size_t end = std::min(order.size(), begin + size_t(cfg.batch_size));
      zero_grads(seg.parameters());
      for (size_t k = begin; k < end; ++k) {
        const size_t i = order[k];
        Tensor loss = dice_pretrain_loss(seg.forward(train[i].y), train_onehot[i]);
        mul(loss, 1.0 / double(end - begin)).backward();
      }
      optimizer_step(opt, seg.parameters());
    }

    const double held = heldout_foreground_dsc(seg, test);
    result.epoch_dsc.push_back(held);
    if (held > result.best_dsc) {
      result.best_dsc = held;
      result.best_epoch = epoch;
      std::map<std::string, std::string> meta;
      meta["best_dsc"] = fmt_double(held);
      meta["best_epoch"] = std::to_string(epoch);
      meta["config_fingerprint"] = std::to_string(run_config_fingerprint(cfg));
      meta["params_checksum"] = std::to_string(params_checksum(seg.parameters()));
      save_tensors(result.checkpoint_prefix, seg.parameters(), meta);
    }
  }
  return result;
}

SegNet load_frozen_segnet(const RunConfig& cfg, const std::string& checkpoint_prefix) {
  SegNet seg(make_segnet_config(cfg));
  auto [tensors, meta] = load_tensors(checkpoint_prefix);
  load_into(seg.parameters(), tensors);
  auto it = meta.find("params_checksum");
  if (it != meta.end() && std::stoull(it->second) != params_checksum(seg.parameters()))
    throw std::runtime_error("segmentation checkpoint " + checkpoint_prefix +
                             " fails its checksum");
  seg.freeze();
  return seg;
}

namespace {

struct GanCheckpointMeta {
  int64_t epoch = 0;  // epochs fully completed
  int64_t step = 0;
  int64_t loss_rows = 0;
  uint64_t fingerprint = 0;
};

void save_gan_checkpoint(const std::string& prefix, const GeneratorNet& gen,
                         const DiscriminatorNet& dis, const ParamOptimizer& og,
                         const ParamOptimizer& od, const GanCheckpointMeta& m) {
  std::vector<NamedParam> tensors = gen.parameters();
  for (const auto& p : dis.parameters()) tensors.push_back(p);
  append_optimizer_tensors(tensors, gen.parameters(), og);
  append_optimizer_tensors(tensors, dis.parameters(), od);
  std::map<std::string, std::string> meta;
  meta["epoch"] = std::to_string(m.epoch);
  meta["step"] = std::to_string(m.step);
  meta["loss_rows"] = std::to_string(m.loss_rows);
  meta["config_fingerprint"] = std::to_string(m.fingerprint);
  meta["adam_t_g"] = std::to_string(og.states.empty() ? 0 : og.states[0].t);
  meta["adam_t_d"] = std::to_string(od.states.empty() ? 0 : od.states[0].t);
  save_tensors(prefix, tensors, meta);
}

GanCheckpointMeta load_gan_checkpoint(const std::string& prefix, GeneratorNet& gen,
                                      DiscriminatorNet& dis, ParamOptimizer& og,
                                      ParamOptimizer& od) {
  auto [tensors, meta] = load_tensors(prefix);
  load_into(gen.parameters(), tensors);
  load_into(dis.parameters(), tensors);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& p : tensors) by_name[p.name] = &p.tensor;
  restore_optimizer_tensors(og, gen.parameters(), by_name, meta_int(meta, "adam_t_g"));
  restore_optimizer_tensors(od, dis.parameters(), by_name, meta_int(meta, "adam_t_d"));
  GanCheckpointMeta m;
  m.epoch = meta_int(meta, "epoch");
  m.step = meta_int(meta, "step");
  m.loss_rows = meta_int(meta, "loss_rows");
  m.fingerprint = meta_u64(meta, "config_fingerprint");
  return m;
}

// Truncates the log back to header + rows (a crash may have left extra rows
// past the last checkpoint) and reopens it for appending.
std::ofstream reopen_loss_log(const std::string& path, int64_t rows) {
  std::vector<std::string> lines;
  {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write loss log " + path);
  if (lines.empty()) lines.push_back("step,dis,gen,r,proj,s,p,total");
  for (int64_t i = 0; i < std::min<int64_t>(1 + rows, int64_t(lines.size())); ++i)
    out << lines[size_t(i)] << "\n";
  return out;
}

void append_loss_row(std::ofstream& log, const LossBreakdown& b) {
  log << b.step << ',' << fmt_double(b.dis) << ',' << fmt_double(b.gen) << ','
      << fmt_double(b.r) << ',' << fmt_double(b.proj) << ',' << fmt_double(b.s) << ','
      << fmt_double(b.p) << ',' << fmt_double(b.total) << "\n";
  log.flush();
}

}  // namespace

GanTrainResult train_gan(const RunConfig& cfg, const SegNet* seg, const FeatureExtractor* fx) {
  validate_run_config(cfg);
  CorpusManifest manifest = load_manifest(cfg.manifest_path);
  require_grids_match(manifest, cfg, "train_gan");
  if (manifest.recon_train.empty())
    throw std::invalid_argument("train_gan: reconstruction corpus train split is empty");
  if (cfg.weights.lambda_s != 0.0) {
    if (!seg) throw std::invalid_argument("train_gan: lambda_s > 0 needs a segmentation network");
    if (!seg->frozen()) throw std::invalid_argument("train_gan: the segmentation network must be frozen");
  }
  if (cfg.weights.lambda_p != 0.0 && !fx)
    throw std::invalid_argument("train_gan: lambda_p > 0 needs a feature extractor");

  fs::create_directories(cfg.out_dir);
  GeneratorNet gen(make_generator_config(cfg));
  DiscriminatorNet dis(make_discriminator_config(cfg));
  ParamOptimizer opt_g = make_param_optimizer(gen.parameters(), cfg.gan_lr, 0.5, 0.999);
  ParamOptimizer opt_d = make_param_optimizer(dis.parameters(), cfg.gan_lr, 0.5, 0.999);
  ProjectorPair pair = make_projector_pair(build_geometry(cfg.geometry));

  const uint64_t seg_checksum_before = seg ? params_checksum(seg->parameters()) : 0;

  GanTrainResult result;
  result.checkpoint_prefix = (fs::path(cfg.out_dir) / "gan_latest").string();
  result.loss_log_path = (fs::path(cfg.out_dir) / "gan_loss.csv").string();

  GanCheckpointMeta state;
  state.fingerprint = run_config_fingerprint(cfg);
  const bool have_checkpoint = fs::exists(result.checkpoint_prefix + ".json");
  if (have_checkpoint && cfg.overwrite) {
    fs::remove(result.checkpoint_prefix + ".json");
    fs::remove(result.checkpoint_prefix + ".bin");
    fs::remove(result.loss_log_path);
  } else if (have_checkpoint) {
    GanCheckpointMeta loaded = load_gan_checkpoint(result.checkpoint_prefix, gen, dis, opt_g, opt_d);
    if (loaded.fingerprint != state.fingerprint)
      throw std::invalid_argument("train_gan: checkpoint " + result.checkpoint_prefix +
                                  " was written by a different configuration; refusing to resume");
    state = loaded;
    state.fingerprint = loaded.fingerprint;
    result.resumed = true;
  }

  std::ofstream log = reopen_loss_log(result.loss_log_path, state.loss_rows);

  // Fails fast on an unreadable corpus before any training work.
  (void)load_training_sample(manifest, manifest.recon_train.front(), /*has_projections=*/true);

  std::vector<size_t> order(manifest.recon_train.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  const std::string last_good =
      result.resumed ? result.checkpoint_prefix : std::string("none");
  try {
    for (int64_t epoch = state.epoch; epoch < cfg.gan_epochs; ++epoch) {
      // The order is a pure function of (seed, epoch) so a resumed run walks
      // the same batches an uninterrupted one would.
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      Rng rng(cfg.train_seed + 0x9e37u * uint64_t(epoch + 1));
      shuffle_indices(order, rng);
      for (size_t begin = 0; begin < order.size(); begin += size_t(cfg.batch_size)) {
        const size_t end = std::min(order.size(), begin + size_t(cfg.batch_size));
        const double inv_b = 1.0 / double(end - begin);
        std::vector<TrainingSample> batch;
        for (size_t k = begin; k < end; ++k)
          batch.push_back(load_training_sample(manifest, manifest.recon_train[order[k]],
                                               /*has_projections=*/true));

        // Discriminator step on real volumes vs detached fakes.
        zero_grads(dis.parameters());
        double d_value = 0.0;
        for (const auto& s : batch) {
          Tensor fake = gen.forward(s.x_ap, s.x_lat).detach();
          Tensor loss = lsgan_d_loss(dis.forward(s.y), dis.forward(fake));
          d_value += loss.item() * inv_b;
          mul(loss, inv_b).backward();
        }
        if (!std::isfinite(d_value))
          throw std::runtime_error("non-finite discriminator loss at step " +
                                   std::to_string(state.step + 1));
        optimizer_step(opt_d, dis.parameters());

        // Generator step on the full weighted objective.
        zero_grads(gen.parameters());
        zero_grads(dis.parameters());  // G's backward also reaches D's tape
        LossBreakdown row;
        for (const auto& s : batch) {
          Tensor y_hat = gen.forward(s.x_ap, s.x_lat);
          auto [loss, b] = generator_objective(y_hat, s.y, dis.forward(y_hat), pair, seg, fx,
                                               cfg.weights, cfg.perceptual_l1, state.step + 1);
          mul(loss, inv_b).backward();
          row.gen += b.gen * inv_b;
          row.r += b.r * inv_b;
          row.proj += b.proj * inv_b;
          row.s += b.s * inv_b;
          row.p += b.p * inv_b;
          row.total += b.total * inv_b;
        }
        optimizer_step(opt_g, gen.parameters());

        state.step += 1;
        row.step = state.step;
        row.dis = d_value;
        append_loss_row(log, row);
        state.loss_rows += 1;
      }
      state.epoch = epoch + 1;
      save_gan_checkpoint(result.checkpoint_prefix, gen, dis, opt_g, opt_d, state);
    }
  } catch (const std::exception& e) {
    throw std::runtime_error(std::string(e.what()) + "; training aborted, last-good checkpoint: " +
                             (state.epoch > 0 || result.resumed ? result.checkpoint_prefix
                                                                : last_good));
  }

  if (seg && params_checksum(seg->parameters()) != seg_checksum_before)
    throw std::runtime_error("train_gan: frozen segmentation network drifted during training");

  result.epochs_completed = state.epoch;
  result.steps_completed = state.step;
  return result;
}

GeneratorNet load_generator(const RunConfig& cfg, const std::string& checkpoint_prefix) {
  GeneratorNet gen(make_generator_config(cfg));
  auto [tensors, meta] = load_tensors(checkpoint_prefix);
  (void)meta;
  load_into(gen.parameters(), tensors);
  return gen;
}

std::pair<Volume, LabelMask> reconstruct(const GeneratorNet& gen, const SegNet& seg,
                                         const Tensor& x_ap, const Tensor& x_lat,
                                         double voxel_pitch_mm) {
  Tensor y_hat = gen.forward(x_ap, x_lat).detach();
  Volume v = hu_denormalize(y_hat, voxel_pitch_mm);
  LabelMask mask = onehot_to_mask(seg.forward(y_hat).detach());
  return {std::move(v), std::move(mask)};
}

}  // namespace ctrecon
