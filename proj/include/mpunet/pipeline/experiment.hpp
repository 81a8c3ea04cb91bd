#ifndef MPUNET_PIPELINE_EXPERIMENT_HPP
#define MPUNET_PIPELINE_EXPERIMENT_HPP

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "mpunet/fusion.hpp"
#include "mpunet/multiplanar.hpp"
#include "mpunet/nn/checkpoint.hpp"
#include "mpunet/nn/loss.hpp"
#include "mpunet/pipeline/config.hpp"
#include "mpunet/pipeline/dataset.hpp"
#include "mpunet/pipeline/training.hpp"
#include "mpunet/unetzoo.hpp"

namespace mpunet {

/// Per-view class-probability volumes on the subject grid.
template <typename T>
std::vector<ProbVolume> predict_subject(nn::Graph<T>& g, const IntensityVolume& v, const PlaneSet& ps,
                                        std::array<int, 2> slice_size, double grid_spacing = 0.0, int batch = 8)
{
    if (v.channels != g.input_channels())
        throw DataError("volume has " + std::to_string(v.channels) + " channels, model expects " +
                        std::to_string(g.input_channels()));
    const double gs = grid_spacing > 0.0 ? grid_spacing : default_grid_spacing(v.geom);
    const int classes = g.output_channels();
    std::vector<ProbVolume> out;
    for (std::size_t view = 0; view < ps.size(); ++view) {
        const auto st = extract_slices(v, ps, static_cast<int>(view), slice_size, gs);
        const std::size_t per_in = st.slice_pixels() * st.channels;
        const std::size_t per_out = st.slice_pixels() * classes;
        std::vector<float> pred(st.grid.pixel_count() * classes);
        for (int start = 0; start < st.grid.slices; start += batch) {
            const int n = std::min(batch, st.grid.slices - start);
            nn::Tensor4<T> x(n, st.grid.rows, st.grid.cols, st.channels);
            for (std::size_t i = 0; i < per_in * n; ++i) x.data[i] = static_cast<T>(st.images[start * per_in + i]);
            const auto outs = g.forward(x, nn::Mode::infer);
            const auto p = nn::softmax(*outs[0]);
            for (std::size_t i = 0; i < per_out * n; ++i) pred[start * per_out + i] = static_cast<float>(p.data[i]);
        }
        out.push_back(map_back(pred, classes, st.grid, v.geom));
    }
    return out;
}

/// Dice of classes 0..K for one subject.
inline std::vector<double> class_dice(const LabelVolume& pred, const LabelVolume& truth, int classes)
{
    std::vector<double> d(classes);
    for (int c = 0; c < classes; ++c) d[c] = dice(pred, truth, c);
    return d;
}

inline double mean_foreground(const std::vector<double>& d)
{
    double s = 0.0;
    for (std::size_t c = 1; c < d.size(); ++c) s += d[c];
    return s / static_cast<double>(d.size() - 1);
}

struct SubjectScores {
    std::string id;
    std::vector<double> fused;                 // per class, background included
    std::vector<std::vector<double>> per_view; // [view][class]
};

struct FoldReport {
    int fold = 0;
    int best_epoch = 0;
    int epochs_run = 0;
    int batch_size = 0;
    double best_val_slice_dice = 0.0;
    double fusion_uniform_loss = 0.0;
    double fusion_fitted_loss = 0.0;
    std::vector<SubjectScores> validation;
    std::vector<SubjectScores> test;
    double train_seconds = 0.0;
    double predict_seconds = 0.0;
};

/// Mean over subjects of the mean non-background Dice; view -1 = fused.
inline double mean_subject_dice(const std::vector<SubjectScores>& s, int view = -1)
{
    double acc = 0.0;
    for (const auto& x : s) acc += mean_foreground(view < 0 ? x.fused : x.per_view[view]);
    return s.empty() ? 0.0 : acc / static_cast<double>(s.size());
}

struct ExperimentReport {
    ExperimentConfig config;
    std::int64_t params = 0;
    PlaneSet planes;
    FoldSplit split;
    std::vector<FoldReport> folds;
    std::filesystem::path run_dir;
};

namespace detail {

inline std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline nlohmann::json scores_json(const std::vector<SubjectScores>& v)
{
    nlohmann::json out = nlohmann::json::array();
    for (const auto& s : v) out.push_back({{"id", s.id}, {"fused", s.fused}, {"per_view", s.per_view}});
    return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<SubjectScores> score_subjects(const std::vector<Subject>& subjects,
                                                 const std::vector<std::vector<ProbVolume>>& probs,
                                                 const FusionParams& fp)
{
    std::vector<SubjectScores> out;
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        const int classes = fp.classes;
        SubjectScores s;
        s.id = subjects[i].id;
        s.fused = class_dice(fuse(probs[i], fp).labels, subjects[i].label, classes);
        for (const auto& p : probs[i]) s.per_view.push_back(class_dice(argmax_labels(p), subjects[i].label, classes));
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace detail

inline std::filesystem::path run_directory(const ExperimentConfig& c)
{
    return std::filesystem::path(c.output) / ("seed_" + std::to_string(c.seed));
}

/// Resolves dataset-dependent settings (class count) into a copy of `c`.
inline ExperimentConfig resolve_config(ExperimentConfig c, const DatasetManifest& m)
{
    if (c.arch.num_classes == 0) c.arch.num_classes = m.num_classes + 1;
    if (c.arch.num_classes < m.num_classes + 1)
        throw UsageError("arch.num_classes is smaller than the dataset's class count + 1");
    c.validate();
    return c;
}

/// Settings fixed before any fold is trained: resolved config, view set,
/// fold split and slice size.
struct ExperimentSetup {
    ExperimentConfig config;
    DatasetManifest manifest;
    PlaneSet planes;
    FoldSplit split;
    std::array<int, 2> slice_size{};
    std::filesystem::path dataset_dir;
    std::filesystem::path run_dir;
};

inline ExperimentSetup prepare_experiment(const ExperimentConfig& config_in)
{
    if (config_in.dataset.empty()) throw UsageError("no dataset directory given");
    ExperimentSetup s;
    s.dataset_dir = config_in.dataset;
    s.manifest = read_dataset_manifest(s.dataset_dir);
    s.config = resolve_config(config_in, s.manifest);
    const auto& cfg = s.config;
    s.planes = sample_plane_set(cfg.planes, derive_seed(cfg.seed, 7), cfg.plane_min_angle);
    std::vector<std::string> ids;
    for (const auto& e : s.manifest.subjects) ids.push_back(e.id);
    s.split = make_folds(ids, cfg.seed, cfg.folds);
    std::vector<Geometry> geoms;
    for (const auto& e : s.manifest.subjects) geoms.push_back(read_volume_header(s.dataset_dir / e.image).geom);
    s.slice_size = resolve_slice_size(cfg, geoms, s.planes);
    s.run_dir = run_directory(cfg);
    return s;
}

/// Seed of fold `f`'s training, shared by every entry point that retrains
/// or refits a fold.
inline std::uint64_t fold_seed(const ExperimentConfig& c, int f)
{
    return derive_seed(c.seed, 100 + static_cast<std::uint64_t>(f));
}

/// Seed of fold `f`'s fusion fit.
inline std::uint64_t fusion_seed(const ExperimentConfig& c, int f) { return derive_seed(fold_seed(c, f), 5); }

struct FoldContext {
    const ExperimentConfig& config;
    const DatasetManifest& manifest;
    const PlaneSet& planes;
    std::array<int, 2> slice_size;
    std::filesystem::path dataset_dir;
    std::filesystem::path run_dir;
};

using FoldEpochCallback = std::function<void(int fold, const EpochLog&)>;

/// Trains fold `f`, fits fusion on its validation subjects and scores its
/// test subjects. Writes the fold's checkpoint, fusion and training log.
inline FoldReport run_fold(const FoldContext& ctx, const Fold& fold, int f, const FoldEpochCallback& on_epoch = {})
{
    const auto& cfg = ctx.config;
    const std::uint64_t seed = fold_seed(cfg, f);
    const auto train = load_subjects(ctx.dataset_dir, ctx.manifest, fold.train);
    const auto val = load_subjects(ctx.dataset_dir, ctx.manifest, fold.validation);

    FoldReport rep;
    rep.fold = f;
    auto t0 = std::chrono::steady_clock::now();
    auto tr = train_fold(cfg, train, val, ctx.planes, ctx.slice_size, seed,
                         [&](const EpochLog& e) { if (on_epoch) on_epoch(f, e); });
    rep.train_seconds = detail::seconds_since(t0);
    rep.best_epoch = tr.best_epoch;
    rep.epochs_run = static_cast<int>(tr.log.size());
    rep.batch_size = tr.batch_size;
    rep.best_val_slice_dice = tr.best_dice;

    const auto dir = ctx.run_dir / ("fold_" + std::to_string(f));
    std::filesystem::create_directories(dir);
    nn::save_checkpoint(tr.graph, dir / "model");
    write_training_log(tr.log, dir / "training_log.csv");

    t0 = std::chrono::steady_clock::now();
    std::vector<std::vector<ProbVolume>> val_probs;
    std::vector<LabelVolume> val_truth;
    for (const auto& s : val) {
        val_probs.push_back(predict_subject(tr.graph, s.image, ctx.planes, ctx.slice_size, cfg.grid_spacing,
                                            tr.batch_size));
        val_truth.push_back(s.label);
    }
    FusionFitConfig fcfg = cfg.fusion;
    fcfg.seed = fusion_seed(cfg, f);
    auto fit = fit_fusion(val_probs, val_truth, fcfg);
    fit.params.planes = ctx.planes.vectors;
    rep.fusion_uniform_loss = fit.initial_loss;
    rep.fusion_fitted_loss = fit.final_loss;
    save_fusion(fit.params, dir / "fusion.json");
    rep.validation = detail::score_subjects(val, val_probs, fit.params);
    val_probs.clear();

    for (const auto& id : fold.test) {
        const auto test = load_subjects(ctx.dataset_dir, ctx.manifest, {id});
        const auto probs = predict_subject(tr.graph, test[0].image, ctx.planes, ctx.slice_size, cfg.grid_spacing,
                                           tr.batch_size);
        auto s = detail::score_subjects(test, {probs}, fit.params);
        rep.test.push_back(std::move(s[0]));
    }
    rep.predict_seconds = detail::seconds_since(t0);
    return rep;
}

inline nlohmann::json report_to_json(const ExperimentReport& r)
{
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : r.folds) {
        nlohmann::json val_views = nlohmann::json::array();
        for (std::size_t v = 0; v < r.planes.size(); ++v) val_views.push_back(mean_subject_dice(f.validation, static_cast<int>(v)));
        folds.push_back({{"fold", f.fold},
                         {"best_epoch", f.best_epoch},
                         {"epochs_run", f.epochs_run},
                         {"batch_size", f.batch_size},
                         {"best_val_slice_dice", f.best_val_slice_dice},
                         {"fusion_uniform_loss", f.fusion_uniform_loss},
                         {"fusion_fitted_loss", f.fusion_fitted_loss},
                         {"val_fused_dice", mean_subject_dice(f.validation)},
                         {"val_view_dice", val_views},
                         {"test_fused_dice", mean_subject_dice(f.test)},
                         {"validation", detail::scores_json(f.validation)},
                         {"test", detail::scores_json(f.test)}});
    }
    nlohmann::json planes = nlohmann::json::array();
    for (const auto& v : r.planes.vectors) planes.push_back({v[0], v[1], v[2]});
    double agg = 0.0;
    for (const auto& f : r.folds) agg += mean_subject_dice(f.test);
    if (!r.folds.empty()) agg /= static_cast<double>(r.folds.size());
    return {{"arch", r.config.arch.label()},
            {"planes", r.config.planes},
            {"params", r.params},
            {"sample_unit", "subject-class"},
            {"plane_vectors", planes},
            {"folds", folds},
            {"mean_test_dice", agg}};
}

/// One row per (fold, class) including a per-fold "mean" row, one per class
/// averaged over folds, and a single aggregate row.
inline std::string report_to_csv(const ExperimentReport& r)
{
    const std::string arch = r.config.arch.label();
    const std::string k = std::to_string(r.config.planes);
    const std::string params = std::to_string(r.params);
    const int classes = r.config.arch.num_classes;
    std::string out = "arch,planes,fold,scope,class,dice,subjects,params\n";
    auto row = [&](const std::string& fold, const char* scope, const std::string& cls, double d, std::size_t n) {
        out += arch + "," + k + "," + fold + "," + scope + "," + cls + "," + detail::fmt(d) + "," + std::to_string(n) +
               "," + params + "\n";
    };
    std::vector<double> class_sum(classes, 0.0);
    double mean_sum = 0.0;
    for (const auto& f : r.folds) {
        const std::size_t n = f.test.size();
        for (int c = 1; c < classes; ++c) {
            double s = 0.0;
            for (const auto& t : f.test) s += t.fused[c];
            s /= static_cast<double>(n);
            class_sum[c] += s;
            row(std::to_string(f.fold), "fold", std::to_string(c), s, n);
        }
        const double m = mean_subject_dice(f.test);
        mean_sum += m;
        row(std::to_string(f.fold), "fold", "mean", m, n);
    }
    std::size_t total = 0;
    for (const auto& f : r.folds) total += f.test.size();
    const double nf = static_cast<double>(std::max<std::size_t>(r.folds.size(), 1));
    for (int c = 1; c < classes; ++c) row("all", "class_mean", std::to_string(c), class_sum[c] / nf, total);
    row("all", "aggregate", "mean", mean_sum / nf, total);
    return out;
}

inline void write_text(const std::filesystem::path& p, const std::string& text)
{
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write '" + p.string() + "'");
    out << text;
}

/// End-to-end cross-validated experiment. `jobs` > 1 trains folds on
/// concurrent threads; results do not depend on it.
inline ExperimentReport run_experiment(const ExperimentConfig& config_in, int jobs = 1,
                                       const FoldEpochCallback& on_epoch = {})
{
    const auto t_start = std::chrono::steady_clock::now();
    const auto setup = prepare_experiment(config_in);
    ExperimentReport rep;
    rep.config = setup.config;
    const auto& cfg = rep.config;
    rep.params = count_params(build<float>(cfg.arch)).total;
    rep.planes = setup.planes;
    rep.split = setup.split;
    rep.run_dir = setup.run_dir;
    const auto& slice_size = setup.slice_size;
    std::filesystem::create_directories(rep.run_dir);
    nlohmann::json planes = nlohmann::json::array();
    for (const auto& v : rep.planes.vectors) planes.push_back({v[0], v[1], v[2]});
    write_text(rep.run_dir / "manifest.json",
               nlohmann::json{{"config", config_to_json(cfg)},
                              {"slice_size", slice_size},
                              {"plane_vectors", planes},
                              {"params", rep.params},
                              {"folds", folds_to_json(rep.split)}}
                       .dump(2) +
                   "\n");

    const FoldContext ctx{cfg, setup.manifest, rep.planes, slice_size, setup.dataset_dir, rep.run_dir};
    const auto which = cfg.folds_to_run();
    rep.folds.resize(which.size());
    std::vector<std::exception_ptr> errors(which.size());
    std::mutex cb_mutex;
    FoldEpochCallback cb;
    if (on_epoch)
        cb = [&](int f, const EpochLog& e) {
            std::lock_guard<std::mutex> lock(cb_mutex);
            on_epoch(f, e);
        };
    auto work = [&](std::size_t i) {
        try {
            rep.folds[i] = run_fold(ctx, rep.split[which[i]], which[i], cb);
        }
        catch (...) {
            errors[i] = std::current_exception();
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min<std::size_t>(jobs < 1 ? 1 : jobs, which.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < which.size(); ++i) work(i);
    }
    else {
        std::mutex next_mutex;
        std::size_t next = 0;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t i;
                    {
                        std::lock_guard<std::mutex> lock(next_mutex);
                        if (next >= which.size()) return;
                        i = next++;
                    }
                    work(i);
                }
            });
        for (auto& t : pool) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    write_text(rep.run_dir / "report.json", report_to_json(rep).dump(2) + "\n");
    write_text(rep.run_dir / "report.csv", report_to_csv(rep));
    nlohmann::json timing = nlohmann::json::array();
    for (const auto& f : rep.folds)
        timing.push_back({{"fold", f.fold}, {"train_seconds", f.train_seconds}, {"predict_seconds", f.predict_seconds}});
    write_text(rep.run_dir / "timing.json",
               nlohmann::json{{"folds", timing}, {"total_seconds", detail::seconds_since(t_start)}, {"jobs", jobs}}
                       .dump(2) +
                   "\n");
    return rep;
}

} // namespace mpunet

#endif // MPUNET_PIPELINE_EXPERIMENT_HPP
