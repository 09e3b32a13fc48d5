#ifndef ASPCNET_TRAIN_HPP
#define ASPCNET_TRAIN_HPP

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "aspcnet/checkpoint.hpp"
#include "aspcnet/dataio.hpp"
#include "aspcnet/model.hpp"

namespace aspcnet {

struct EpochStats {
  int epoch = 0;
  double loss = 0;
  double train_oa = 0;
  double seconds = 0;
};

struct FitOptions {
  int start_epoch = 0;  // resume point; epochs keep absolute numbering
  bool early_stop = false;
  int patience = 10;
  std::string checkpoint_dir;  // writes best.ckpt / last.ckpt when non-empty
  const PcaModel* pca = nullptr;  // stored alongside checkpoints when given
  std::function<void(const EpochStats&)> on_epoch;
};

/// Margin-loss training with Adam over the split's training pixels. Batches
/// are reshuffled per (seed, epoch), so a resumed run continues the same
/// schedule. Loss is the sample-weighted epoch mean; train_oa is measured on
/// the forward passes of the epoch.
template <typename S>
std::vector<EpochStats> fit(AspcNet<S>& net, AdamOptimizer<S>& opt, const HsiCube& cube,
                            const LabelRaster& labels, const SplitSpec& split,
                            const FitOptions& options = {}) {
  check(!split.train.empty(), "fit: empty training set");
  const AspcNetConfig& cfg = net.cfg;
  std::vector<int> train_labels(split.train.size());
  for (std::size_t i = 0; i < split.train.size(); ++i) {
    const int lab = labels.at(split.train[i].first, split.train[i].second);
    check(lab >= 1 && lab <= cfg.classes, "fit: training pixel without a valid label");
    train_labels[i] = lab - 1;
  }

  std::vector<EpochStats> log;
  double best_oa = -1.0;
  int best_epoch = -1;
  for (int epoch = options.start_epoch; epoch < cfg.epochs; ++epoch) {
    const auto wall_start = std::chrono::steady_clock::now();
    BatchIterator batches(split.train.size(), cfg.batch, cfg.seed, epoch);
    std::vector<std::size_t> idx;
    double loss_sum = 0;
    std::size_t seen = 0, correct = 0;
    while (batches.next(idx)) {
      std::vector<std::pair<int, int>> px(idx.size());
      std::vector<int> batch_labels(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) {
        px[i] = split.train[idx[i]];
        batch_labels[i] = train_labels[idx[i]];
      }
      Tape<S> tape;
      Var<S> input = tape.input(extract_patch_batch<S>(cube, px, cfg.patch));
      Var<S> scores = net.forward(tape, input, BnMode::train);
      Var<S> loss = margin_loss(scores, batch_labels, cfg);
      net.zero_grad();
      tape.backward(loss);
      opt.step(net.params());
      loss_sum += static_cast<double>(tape.value(loss).data[0]) * static_cast<double>(idx.size());
      const Tensor<S>& sc = tape.value(scores);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        int arg = 0;
        for (int j = 1; j < cfg.classes; ++j)
          if (sc.at({static_cast<int>(i), j}) > sc.at({static_cast<int>(i), arg})) arg = j;
        if (arg == batch_labels[i]) ++correct;
      }
      seen += idx.size();
    }
    EpochStats stats;
    stats.epoch = epoch;
    stats.loss = loss_sum / static_cast<double>(seen);
    stats.train_oa = static_cast<double>(correct) / static_cast<double>(seen);
    stats.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
    log.push_back(stats);
    if (options.on_epoch) options.on_epoch(stats);

    if (!options.checkpoint_dir.empty()) {
      std::map<std::string, std::string> extra{{"epoch", std::to_string(epoch)}};
      if (stats.train_oa > best_oa)
        save_network(net, options.checkpoint_dir + "/best.ckpt", &opt, options.pca, extra);
      save_network(net, options.checkpoint_dir + "/last.ckpt", &opt, options.pca, extra);
    }
    if (stats.train_oa > best_oa) {
      best_oa = stats.train_oa;
      best_epoch = epoch;
    }
    if (options.early_stop && epoch - best_epoch >= options.patience) break;
  }
  return log;
}

/// Batched inference over a pixel list.
template <typename S>
std::vector<int> predict_pixels(AspcNet<S>& net, const HsiCube& cube,
                                const std::vector<std::pair<int, int>>& pixels, int batch) {
  std::vector<int> out;
  out.reserve(pixels.size());
  for (std::size_t start = 0; start < pixels.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(pixels.size(), start + static_cast<std::size_t>(batch));
    std::vector<std::pair<int, int>> chunk(pixels.begin() + static_cast<std::ptrdiff_t>(start),
                                           pixels.begin() + static_cast<std::ptrdiff_t>(end));
    std::vector<int> pred = classify(net, extract_patch_batch<S>(cube, chunk, net.cfg.patch));
    out.insert(out.end(), pred.begin(), pred.end());
  }
  return out;
}

}  // namespace aspcnet

#endif  // ASPCNET_TRAIN_HPP
