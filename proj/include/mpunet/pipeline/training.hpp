#ifndef MPUNET_PIPELINE_TRAINING_HPP
#define MPUNET_PIPELINE_TRAINING_HPP

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "mpunet/augment.hpp"
#include "mpunet/core/error.hpp"
#include "mpunet/core/rng.hpp"
#include "mpunet/multiplanar.hpp"
#include "mpunet/nn/adam.hpp"
#include "mpunet/nn/graph.hpp"
#include "mpunet/nn/loss.hpp"
#include "mpunet/pipeline/config.hpp"
#include "mpunet/pipeline/dataset.hpp"
#include "mpunet/unetzoo.hpp"

namespace mpunet {

/// Patience-based stopping on a score where larger is better. Only a
/// strictly greater score counts as an improvement.
class EarlyStopping {
public:
    explicit EarlyStopping(int patience) : patience_(patience)
    {
        if (patience < 1) throw UsageError("patience must be positive");
    }

    /// Records the next epoch's score; returns true when it is a new best.
    bool update(double score)
    {
        ++epoch_;
        if (score > best_) {
            best_ = score;
            best_epoch_ = epoch_;
            stale_ = 0;
            return true;
        }
        ++stale_;
        return false;
    }

    bool should_stop() const { return stale_ >= patience_; }
    int best_epoch() const { return best_epoch_; }
    double best_score() const { return best_; }
    int epochs_seen() const { return epoch_; }

private:
    int patience_;
    int epoch_ = 0;
    int best_epoch_ = 0;
    int stale_ = 0;
    double best_ = -std::numeric_limits<double>::infinity();
};

/// Rounds `n` up to a multiple of `m`.
inline int round_up(int n, int m) { return (n + m - 1) / m * m; }

inline double default_grid_spacing(const Geometry& g)
{
    return std::min({g.spacing[0], g.spacing[1], g.spacing[2]});
}

/// Slice size used for every view: the configured size, or the largest
/// in-plane lattice extent over the given geometries rounded up to the
/// network's pooling multiple.
inline std::array<int, 2> resolve_slice_size(const ExperimentConfig& c, const std::vector<Geometry>& geoms,
                                             const PlaneSet& ps)
{
    const int mult = 1 << (c.arch.levels - 1);
    std::array<int, 2> size = c.slice_size;
    for (int d = 0; d < 2; ++d) {
        if (size[d] == 0) {
            int ext = 1;
            for (const auto& g : geoms) {
                const double gs = c.grid_spacing > 0.0 ? c.grid_spacing : default_grid_spacing(g);
                for (std::size_t v = 0; v < ps.size(); ++v) ext = std::max(ext, lattice_extent(g, ps.bases[v][d], gs));
            }
            size[d] = ext;
        }
        size[d] = round_up(size[d], mult);
    }
    return size;
}

/// Labelled slice stacks for a set of subjects, one per (subject, view).
struct SliceBank {
    std::vector<std::vector<SliceStack>> stacks; // [subject][view]
    int rows = 0;
    int cols = 0;
    int channels = 1;
};

inline SliceBank build_slice_bank(const std::vector<Subject>& subjects, const PlaneSet& ps, std::array<int, 2> size,
                                  double grid_spacing)
{
    SliceBank bank;
    bank.rows = size[0];
    bank.cols = size[1];
    for (const auto& s : subjects) {
        const double gs = grid_spacing > 0.0 ? grid_spacing : default_grid_spacing(s.image.geom);
        bank.channels = s.image.channels;
        std::vector<SliceStack> views;
        for (std::size_t v = 0; v < ps.size(); ++v)
            views.push_back(extract_slices(s.image, &s.label, ps, static_cast<int>(v), size, gs));
        bank.stacks.push_back(std::move(views));
    }
    return bank;
}

struct SliceRef {
    std::uint32_t subject = 0;
    std::uint32_t view = 0;
    std::uint32_t slice = 0;
};

/// Uniform over subject, then view, then slice index.
inline SliceRef draw_slice(const SliceBank& bank, Rng& rng)
{
    SliceRef r;
    r.subject = static_cast<std::uint32_t>(uniform_index(rng, bank.stacks.size()));
    r.view = static_cast<std::uint32_t>(uniform_index(rng, bank.stacks[r.subject].size()));
    r.slice = static_cast<std::uint32_t>(uniform_index(rng, bank.stacks[r.subject][r.view].grid.slices));
    return r;
}

inline Image2D<float> slice_image(const SliceBank& bank, const SliceRef& r)
{
    const auto& st = bank.stacks[r.subject][r.view];
    const std::size_t per = st.slice_pixels() * st.channels;
    Image2D<float> img{bank.rows, bank.cols, st.channels, {}};
    img.data.assign(st.images.begin() + static_cast<std::ptrdiff_t>(r.slice * per),
                    st.images.begin() + static_cast<std::ptrdiff_t>((r.slice + 1) * per));
    return img;
}

inline Image2D<std::uint8_t> slice_label(const SliceBank& bank, const SliceRef& r)
{
    const auto& st = bank.stacks[r.subject][r.view];
    const std::size_t per = st.slice_pixels();
    Image2D<std::uint8_t> lab{bank.rows, bank.cols, 1, {}};
    lab.data.assign(st.labels.begin() + static_cast<std::ptrdiff_t>(r.slice * per),
                    st.labels.begin() + static_cast<std::ptrdiff_t>((r.slice + 1) * per));
    return lab;
}

/// Largest batch size (halving from the configured start, not below the
/// floor) whose estimated training footprint fits the memory budget.
template <typename T>
int choose_batch_size(const ExperimentConfig& c, const nn::Graph<T>& g, int rows, int cols)
{
    const std::uint64_t fixed = 4ull * g.parameter_count() * sizeof(T); // value, grad, two moments
    const std::uint64_t per = g.activation_bytes_per_sample(rows, cols);
    int b = c.batch_size;
    auto need = [&](int n) { return fixed + per * static_cast<std::uint64_t>(n); };
    while (b > c.min_batch_size && need(b) > c.memory_budget_bytes) b = std::max(c.min_batch_size, b / 2);
    if (need(b) > c.memory_budget_bytes)
        throw UsageError("batch of " + std::to_string(b) + " needs about " + std::to_string(need(b) >> 20) +
                         " MiB, above the memory budget of " + std::to_string(c.memory_budget_bytes >> 20) + " MiB");
    return b;
}

/// Parameter and buffer values of a graph.
template <typename T>
struct Snapshot {
    std::vector<nn::AlignedVector<T>> params;
    std::vector<nn::AlignedVector<T>> buffers;

    static Snapshot capture(const nn::Graph<T>& g)
    {
        Snapshot s;
        for (const auto& p : g.params()) s.params.push_back(p.value);
        for (const auto& b : g.buffers()) s.buffers.push_back(b.value);
        return s;
    }

    void restore(nn::Graph<T>& g) const
    {
        for (std::size_t i = 0; i < params.size(); ++i) g.params()[i].value = params[i];
        for (std::size_t i = 0; i < buffers.size(); ++i) g.buffers()[i].value = buffers[i];
    }
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_dice = 0.0;
    bool improved = false;
};

inline void write_training_log(const std::vector<EpochLog>& log, const std::filesystem::path& path)
{
    std::ofstream out(path);
    if (!out) throw DataError("cannot write training log '" + path.string() + "'");
    out << "epoch,train_loss,val_dice,improved\n";
    char line[128];
    for (const auto& e : log) {
        std::snprintf(line, sizeof line, "%d,%.9g,%.9g,%d\n", e.epoch, e.train_loss, e.val_dice, e.improved ? 1 : 0);
        out << line;
    }
}

/// Pooled per-class overlap counts of label images.
struct OverlapCounts {
    std::vector<std::uint64_t> tp, fp, fn;

    explicit OverlapCounts(int classes) : tp(classes, 0), fp(classes, 0), fn(classes, 0) {}

    void add(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth)
    {
        for (std::size_t i = 0; i < pred.size(); ++i) {
            if (pred[i] == truth[i]) ++tp[pred[i]];
            else {
                ++fp[pred[i]];
                ++fn[truth[i]];
            }
        }
    }

    double dice(int c) const
    {
        const auto den = 2 * tp[c] + fp[c] + fn[c];
        return den == 0 ? 1.0 : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(den);
    }

    /// Mean over the non-background classes.
    double mean_foreground_dice() const
    {
        double s = 0.0;
        for (std::size_t c = 1; c < tp.size(); ++c) s += dice(static_cast<int>(c));
        return s / static_cast<double>(tp.size() - 1);
    }
};

/// Per-pixel argmax over the channel axis (ties to the lowest class).
template <typename T>
std::vector<std::uint8_t> argmax_channels(const nn::Tensor4<T>& t)
{
    std::vector<std::uint8_t> out(t.pixels());
    for (std::size_t q = 0; q < out.size(); ++q) {
        const T* z = t.data.data() + q * t.c;
        int best = 0;
        for (int k = 1; k < t.c; ++k)
            if (z[k] > z[best]) best = k;
        out[q] = static_cast<std::uint8_t>(best);
    }
    return out;
}

/// Mean non-background Dice of the primary output over a fixed slice list.
template <typename T>
double validation_dice(nn::Graph<T>& g, const SliceBank& bank, const std::vector<SliceRef>& refs, int batch)
{
    OverlapCounts counts(g.output_channels());
    for (std::size_t start = 0; start < refs.size(); start += batch) {
        const int n = static_cast<int>(std::min<std::size_t>(batch, refs.size() - start));
        nn::Tensor4<T> x(n, bank.rows, bank.cols, bank.channels);
        std::vector<std::uint8_t> truth;
        for (int b = 0; b < n; ++b) {
            const auto img = slice_image(bank, refs[start + b]);
            std::copy(img.data.begin(), img.data.end(), x.image(b));
            const auto lab = slice_label(bank, refs[start + b]);
            truth.insert(truth.end(), lab.data.begin(), lab.data.end());
        }
        const auto outs = g.forward(x, nn::Mode::infer);
        counts.add(argmax_channels(*outs[0]), truth);
    }
    return counts.mean_foreground_dice();
}

struct TrainResult {
    nn::Graph<float> graph{1};
    std::vector<EpochLog> log;
    int best_epoch = 0;
    double best_dice = 0.0;
    int batch_size = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Trains one fold from scratch and returns the best-validation-Dice
/// weights. Only the given training and validation subjects are seen.
inline TrainResult train_fold(const ExperimentConfig& cfg, const std::vector<Subject>& train,
                              const std::vector<Subject>& validation, const PlaneSet& ps, std::array<int, 2> slice_size,
                              std::uint64_t fold_seed, const EpochCallback& on_epoch = {})
{
    cfg.validate();
    if (train.empty() || validation.empty()) throw DataError("training needs non-empty training and validation sets");
    if (cfg.arch.num_classes < 2) throw UsageError("resolve arch.num_classes before training");
    for (const auto* set : {&train, &validation})
        for (const auto& s : *set)
            if (s.label.num_classes + 1 > cfg.arch.num_classes)
                throw DataError("subject '" + s.id + "' has more classes than the network outputs");

    TrainResult res;
    res.graph = build<float>(cfg.arch);
    auto& g = res.graph;
    g.initialize(derive_seed(fold_seed, 1));
    res.batch_size = choose_batch_size(cfg, g, slice_size[0], slice_size[1]);

    const auto train_bank = build_slice_bank(train, ps, slice_size, cfg.grid_spacing);
    const auto val_bank = build_slice_bank(validation, ps, slice_size, cfg.grid_spacing);
    Rng val_rng(derive_seed(fold_seed, 2));
    std::vector<SliceRef> val_refs(static_cast<std::size_t>(cfg.val_images_per_epoch));
    for (auto& r : val_refs) r = draw_slice(val_bank, val_rng);

    Rng sample_rng(derive_seed(fold_seed, 3));
    Rng augment_rng(derive_seed(fold_seed, 4));
    nn::OptimState<float> opt;
    opt.config = cfg.adam;
    EarlyStopping stopper(cfg.patience);
    auto best = Snapshot<float>::capture(g);

    const int b = res.batch_size;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        double loss_sum = 0.0;
        int batches = 0;
        for (int done = 0; done < cfg.train_images_per_epoch; done += b) {
            const int n = std::min(b, cfg.train_images_per_epoch - done);
            nn::Tensor4<float> x(n, train_bank.rows, train_bank.cols, train_bank.channels);
            std::vector<std::uint8_t> labels;
            labels.reserve(static_cast<std::size_t>(n) * x.h * x.w);
            for (int k = 0; k < n; ++k) {
                const auto ref = draw_slice(train_bank, sample_rng);
                auto [img, lab] = elastic_deform(slice_image(train_bank, ref), slice_label(train_bank, ref),
                                                 cfg.augmentation, augment_rng);
                if (cfg.affine.enabled) std::tie(img, lab) = affine_deform(img, lab, cfg.affine, augment_rng);
                std::copy(img.data.begin(), img.data.end(), x.image(k));
                labels.insert(labels.end(), lab.data.begin(), lab.data.end());
            }
            const auto outs = g.forward(x, nn::Mode::train);
            std::vector<nn::Tensor4<float>> grads;
            const double loss = nn::segmentation_loss(outs, labels, g.params(), cfg.adam.weight_decay, &grads);
            if (!std::isfinite(loss)) throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch));
            g.zero_grad();
            g.backward(grads);
            nn::adam_step(opt, g.params());
            loss_sum += loss;
            ++batches;
        }
        EpochLog e;
        e.epoch = epoch;
        e.train_loss = loss_sum / batches;
        e.val_dice = validation_dice(g, val_bank, val_refs, b);
        e.improved = stopper.update(e.val_dice);
        if (e.improved) best = Snapshot<float>::capture(g);
        res.log.push_back(e);
        if (on_epoch) on_epoch(e);
        if (stopper.should_stop()) break;
    }
    best.restore(g);
    res.best_epoch = stopper.best_epoch();
    res.best_dice = stopper.best_score();
    return res;
}

} // namespace mpunet

#endif // MPUNET_PIPELINE_TRAINING_HPP
