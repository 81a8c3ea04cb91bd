#include <fstream>
#include <iostream>
#include <map>
#include <memory>

#include "CLI11.hpp"

#include "mpunet/evalstats.hpp"
#include "mpunet/pipeline/experiment.hpp"

namespace {

using namespace mpunet;
namespace fs = std::filesystem;
using nlohmann::json;

int verbosity = 1;

void note(const std::string& msg)
{
    if (verbosity > 0) std::cerr << msg << '\n';
}

json read_json(const fs::path& p)
{
    std::ifstream in(p);
    if (!in) throw DataError("cannot open '" + p.string() + "'");
    try {
        return json::parse(in);
    }
    catch (const json::exception& e) {
        throw DataError("'" + p.string() + "' is not valid JSON: " + e.what());
    }
}

json vec_json(const Vec3& v) { return json::array({v[0], v[1], v[2]}); }

/// Config file plus command-line overrides; flags win over the file, the
/// file over built-in defaults.
class ConfigOptions {
public:
    void attach(CLI::App& app, bool training_flags)
    {
        app.add_option("-c,--config", path_, "experiment config JSON")->check(CLI::ExistingFile);
        add<std::string>(app, "--dataset", "dataset directory", [](auto& c, auto& v) { c.dataset = v; });
        add<std::string>(app, "-o,--output", "output root", [](auto& c, auto& v) { c.output = v; });
        add<std::uint64_t>(app, "--seed", "experiment seed", [](auto& c, auto& v) { c.seed = v; });
        add<int>(app, "--folds", "number of folds", [](auto& c, auto& v) {
            c.folds = v;
            if (v > 0) c.split = {1.0 - 2.0 / v, 1.0 / v, 1.0 / v};
        });
        if (!training_flags) return;
        add<std::string>(app, "--variant", "unet, unet2p or unet3p",
                         [](auto& c, auto& v) { c.arch.variant = parse_variant(v); });
        add<int>(app, "--levels", "encoder levels", [](auto& c, auto& v) { c.arch.levels = v; });
        add<int>(app, "--base", "base channel count", [](auto& c, auto& v) { c.arch.base_channels = v; });
        add<int>(app, "--planes", "view count (1, 3 or 6)", [](auto& c, auto& v) { c.planes = v; });
        add<std::vector<int>>(app, "--run-folds", "folds to run (default all)",
                              [](auto& c, auto& v) { c.run_folds = v; });
        add<int>(app, "--epochs", "maximum epochs", [](auto& c, auto& v) { c.max_epochs = v; });
        add<int>(app, "--patience", "early-stopping patience", [](auto& c, auto& v) { c.patience = v; });
        add<int>(app, "--train-images", "training images per epoch",
                 [](auto& c, auto& v) { c.train_images_per_epoch = v; });
        add<int>(app, "--val-images", "validation images per epoch",
                 [](auto& c, auto& v) { c.val_images_per_epoch = v; });
        add<int>(app, "--batch-size", "starting batch size", [](auto& c, auto& v) { c.batch_size = v; });
        add<double>(app, "--lr", "Adam learning rate", [](auto& c, auto& v) { c.adam.lr = v; });
        add<std::uint64_t>(app, "--memory-mib", "memory budget in MiB",
                           [](auto& c, auto& v) { c.memory_budget_bytes = v << 20; });
        auto* ds = app.add_flag("--deep-supervision", "auxiliary decoder heads");
        rules_.push_back([ds](ExperimentConfig& c) {
            if (ds->count()) c.arch.deep_supervision = true;
        });
    }

    ExperimentConfig resolve() const
    {
        ExperimentConfig c = path_.empty() ? ExperimentConfig{} : load_config(path_);
        for (const auto& r : rules_) r(c);
        c.validate();
        return c;
    }

private:
    template <typename T, typename F>
    void add(CLI::App& app, const std::string& name, const std::string& help, F set)
    {
        auto value = std::make_shared<T>();
        auto* opt = app.add_option(name, *value, help);
        rules_.push_back([opt, value, set](ExperimentConfig& c) {
            if (opt->count()) set(c, *value);
        });
    }

    std::string path_;
    std::vector<std::function<void(ExperimentConfig&)>> rules_;
};

// ---------------------------------------------------------------------------
// phantom

struct PhantomArgs {
    fs::path out;
    int n = 20;
    std::vector<int> shape{48, 48, 48};
    int classes = 3;
    double noise = 0.3;
    std::uint64_t seed = 0;
};

void cmd_phantom(const PhantomArgs& a)
{
    PhantomSpec spec;
    spec.shape = {a.shape[0], a.shape[1], a.shape[2]};
    spec.num_classes = a.classes;
    spec.shell_radii = default_shell_radii(a.classes);
    spec.noise_sigma = a.noise;
    spec.seed = a.seed;
    const auto m = write_phantom_dataset(a.out, spec, a.n);
    const json gen{{"subjects", a.n},
                   {"shape", spec.shape},
                   {"spacing", vec_json(spec.spacing)},
                   {"num_classes", spec.num_classes},
                   {"shell_radii", spec.shell_radii},
                   {"noise_sigma", spec.noise_sigma},
                   {"intensity_step", spec.intensity_step},
                   {"seed", spec.seed}};
    write_text(a.out / "phantom.json", gen.dump(2) + "\n");
    note("wrote " + std::to_string(m.subjects.size()) + " subjects to " + a.out.string());
}

// ---------------------------------------------------------------------------
// split

void cmd_split(const ConfigOptions& opts)
{
    auto cfg = opts.resolve();
    if (cfg.dataset.empty()) throw UsageError("--dataset is required");
    const auto m = read_dataset_manifest(cfg.dataset);
    std::vector<std::string> ids;
    for (const auto& s : m.subjects) ids.push_back(s.id);
    const auto split = make_folds(ids, cfg.seed, cfg.folds);
    const auto dir = run_directory(cfg);
    fs::create_directories(dir);
    write_text(dir / "split.json",
               json{{"dataset", cfg.dataset}, {"seed", cfg.seed}, {"folds", folds_to_json(split)}}.dump(2) + "\n");
    std::cout << (dir / "split.json").string() << '\n';
}

// ---------------------------------------------------------------------------
// train / fuse-fit / predict share the per-fold manifest

json fold_manifest(const ExperimentSetup& s, int f)
{
    json planes = json::array();
    for (const auto& v : s.planes.vectors) planes.push_back(vec_json(v));
    const auto& fold = s.split.at(static_cast<std::size_t>(f));
    return {{"config", config_to_json(s.config)},
            {"fold", f},
            {"plane_vectors", planes},
            {"slice_size", s.slice_size},
            {"train", fold.train},
            {"validation", fold.validation},
            {"test", fold.test}};
}

struct FoldModel {
    ExperimentConfig config;
    int fold = 0;
    PlaneSet planes;
    std::array<int, 2> slice_size{};
    std::vector<std::string> validation;
    nn::Graph<float> graph{1};
};

FoldModel load_fold_model(const fs::path& dir)
{
    const auto j = read_json(dir / "manifest.json");
    FoldModel m;
    try {
        apply_json(m.config, j.at("config"));
        m.fold = j.at("fold").get<int>();
        m.slice_size = j.at("slice_size").get<std::array<int, 2>>();
        m.validation = j.at("validation").get<std::vector<std::string>>();
    }
    catch (const json::exception& e) {
        throw DataError("malformed fold manifest in '" + dir.string() + "': " + e.what());
    }
    m.planes = sample_plane_set(m.config.planes, derive_seed(m.config.seed, 7), m.config.plane_min_angle);
    m.graph = build<float>(m.config.arch);
    nn::load_checkpoint(m.graph, dir / "model");
    return m;
}

void cmd_train(const ConfigOptions& opts, int f)
{
    const auto s = prepare_experiment(opts.resolve());
    if (f < 0 || f >= s.config.folds) throw UsageError("--fold out of range");
    const auto& fold = s.split[static_cast<std::size_t>(f)];
    const auto train = load_subjects(s.dataset_dir, s.manifest, fold.train);
    const auto val = load_subjects(s.dataset_dir, s.manifest, fold.validation);
    auto res = train_fold(s.config, train, val, s.planes, s.slice_size, fold_seed(s.config, f), [&](const EpochLog& e) {
        if (verbosity > 1)
            std::cerr << "fold " << f << " epoch " << e.epoch << " loss " << e.train_loss << " val dice " << e.val_dice
                      << (e.improved ? " *" : "") << '\n';
    });
    const auto dir = s.run_dir / ("fold_" + std::to_string(f));
    fs::create_directories(dir);
    nn::save_checkpoint(res.graph, dir / "model");
    write_training_log(res.log, dir / "training_log.csv");
    write_text(dir / "manifest.json", fold_manifest(s, f).dump(2) + "\n");
    note("fold " + std::to_string(f) + ": best epoch " + std::to_string(res.best_epoch) + ", validation Dice " +
         std::to_string(res.best_dice));
    std::cout << dir.string() << '\n';
}

void cmd_fuse_fit(const fs::path& model_dir)
{
    auto m = load_fold_model(model_dir);
    const auto manifest = read_dataset_manifest(m.config.dataset);
    const auto val = load_subjects(m.config.dataset, manifest, m.validation);
    std::vector<std::vector<ProbVolume>> probs;
    std::vector<LabelVolume> truth;
    for (const auto& s : val) {
        probs.push_back(predict_subject(m.graph, s.image, m.planes, m.slice_size, m.config.grid_spacing));
        truth.push_back(s.label);
    }
    FusionFitConfig fcfg = m.config.fusion;
    fcfg.seed = fusion_seed(m.config, m.fold);
    auto fit = fit_fusion(probs, truth, fcfg);
    fit.params.planes = m.planes.vectors;
    save_fusion(fit.params, model_dir / "fusion.json");
    note("fusion cross-entropy " + std::to_string(fit.initial_loss) + " -> " + std::to_string(fit.final_loss));
}

void cmd_predict(const fs::path& model_dir, const fs::path& image, const fs::path& out)
{
    auto m = load_fold_model(model_dir);
    const auto vol = robust_scale(load_intensity(image));
    const auto probs = predict_subject(m.graph, vol, m.planes, m.slice_size, m.config.grid_spacing);
    const int classes = m.graph.output_channels();
    const auto fusion_path = model_dir / "fusion.json";
    const bool fitted = fs::exists(fusion_path);
    const auto fp = fitted ? load_fusion(fusion_path) : FusionParams::uniform(static_cast<int>(probs.size()), classes);
    fs::create_directories(out);
    for (std::size_t v = 0; v < probs.size(); ++v) save_volume(probs[v], out / ("view_" + std::to_string(v) + ".mvh"));
    auto fused = fuse(probs, fp).labels;
    fused.num_classes = classes - 1;
    save_volume(fused, out / "labels.mvh");
    write_text(out / "manifest.json", json{{"model", model_dir.string()},
                                           {"image", image.string()},
                                           {"fusion", fitted ? "fitted" : "uniform"},
                                           {"views", probs.size()}}
                                          .dump(2) +
                                          "\n");
    std::cout << (out / "labels.mvh").string() << '\n';
}

// ---------------------------------------------------------------------------
// evaluate

void cmd_evaluate(const fs::path& pred_path, const fs::path& truth_path)
{
    const auto pred = load_labels(pred_path);
    const auto truth = load_labels(truth_path);
    require_same_shape(pred.geom, truth.geom, "prediction and truth");
    const int classes = std::max(pred.num_classes, truth.num_classes) + 1;
    const auto d = class_dice(pred, truth, classes);
    std::cout << "class,dice\n";
    for (int c = 1; c < classes; ++c) std::cout << c << ',' << detail::fmt(d[c]) << '\n';
    std::cout << "mean," << detail::fmt(mean_foreground(d)) << '\n';
}

// ---------------------------------------------------------------------------
// stats

struct MethodScores {
    std::string name;
    std::string dataset;
    std::vector<std::string> keys; // fold:subject:class, for pairing
    std::vector<double> dice;
};

MethodScores read_method(const fs::path& report, const std::string& name)
{
    const auto j = read_json(report);
    MethodScores m;
    const auto manifest = report.parent_path() / "manifest.json";
    m.dataset = "dataset";
    if (fs::exists(manifest)) {
        const auto mj = read_json(manifest);
        if (mj.contains("config") && mj["config"].contains("dataset"))
            m.dataset = fs::path(mj["config"]["dataset"].get<std::string>()).filename().string();
    }
    try {
        m.name = name.empty() ? j.at("arch").get<std::string>() + "_k" + std::to_string(j.at("planes").get<int>()) : name;
        for (const auto& f : j.at("folds"))
            for (const auto& s : f.at("test")) {
                const auto d = s.at("fused").get<std::vector<double>>();
                for (std::size_t c = 1; c < d.size(); ++c) {
                    m.keys.push_back(std::to_string(f.at("fold").get<int>()) + ":" + s.at("id").get<std::string>() +
                                     ":" + std::to_string(c));
                    m.dice.push_back(d[c]);
                }
            }
    }
    catch (const json::exception& e) {
        throw DataError("malformed report '" + report.string() + "': " + e.what());
    }
    if (m.dice.size() < 2) throw DataError("report '" + report.string() + "' has fewer than two test scores");
    return m;
}

double pvalue(const std::string& test, const MethodScores& a, const MethodScores& b)
{
    if (test == "rank_sum") return wilcoxon_test(a.dice, b.dice, WilcoxonMode::rank_sum).p;
    if (a.keys != b.keys)
        throw DataError("'" + a.name + "' and '" + b.name + "' were not scored on the same subjects; paired tests need that");
    if (test == "signed_rank") return wilcoxon_test(a.dice, b.dice, WilcoxonMode::signed_rank).p;
    return paired_t_test(a.dice, b.dice).p;
}

void cmd_stats(const std::vector<fs::path>& reports, const std::vector<std::string>& names, const std::string& which,
               const fs::path& out, const fs::path& box_out)
{
    if (!names.empty() && names.size() != reports.size()) throw UsageError("--name must be given once per --report");
    std::map<std::string, std::vector<MethodScores>> by_dataset;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        auto m = read_method(reports[i], names.empty() ? "" : names[i]);
        by_dataset[m.dataset].push_back(std::move(m));
    }
    const std::vector<std::string> tests =
        which == "all" ? std::vector<std::string>{"rank_sum", "signed_rank", "paired_t"} : std::vector<std::string>{which};

    std::ostringstream csv;
    for (const auto& [dataset, methods] : by_dataset) {
        csv << "dataset,test,unit,method";
        for (const auto& m : methods) csv << ',' << m.name;
        csv << '\n';
        for (const auto& t : tests)
            for (const auto& a : methods) {
                csv << dataset << ',' << t << ",subject-class," << a.name;
                for (const auto& b : methods) {
                    csv << ',';
                    if (&a == &b) csv << '-';
                    else csv << detail::fmt(pvalue(t, a, b));
                }
                csv << '\n';
            }
    }
    if (out.empty()) std::cout << csv.str();
    else write_text(out, csv.str());

    if (box_out.empty()) return;
    std::ostringstream box;
    box << "dataset,method,n,min,p25,median,p75,max,mean,iqr,outliers\n";
    for (const auto& [dataset, methods] : by_dataset)
        for (const auto& m : methods) {
            const auto b = box_stats(m.dice);
            box << dataset << ',' << m.name << ',' << m.dice.size();
            for (double v : {b.min, b.p25, b.median, b.p75, b.max, b.mean, b.iqr}) box << ',' << detail::fmt(v);
            box << ',' << b.outliers.size() << '\n';
        }
    write_text(box_out, box.str());
}

// ---------------------------------------------------------------------------
// params

struct ParamsArgs {
    std::string variant = "all";
    int levels = 5;
    int base = 32;
    int kernel = 3;
    int in_channels = 1;
    int classes = 8;
    int cat = 64;
    bool sqrt2 = false;
    bool ds = false;
};

int cmd_params(const ParamsArgs& a)
{
    std::vector<Variant> variants;
    if (a.variant == "all") variants = {Variant::unet, Variant::unet2p, Variant::unet3p};
    else variants = {parse_variant(a.variant)};
    std::vector<ArchSpec> specs;
    for (Variant v : variants) {
        ArchSpec s;
        s.variant = v;
        s.levels = a.levels;
        s.base_channels = a.base;
        s.kernel = a.kernel;
        s.in_channels = a.in_channels;
        s.num_classes = a.classes;
        s.cat_channels = a.cat;
        s.sqrt2_scale = a.sqrt2 && v == Variant::unet;
        s.deep_supervision = a.ds && v != Variant::unet;
        s.validate();
        specs.push_back(s);
    }
    int mismatches = 0;
    std::cout << "arch,stage,formula,graph,delta\n";
    for (const auto& s : specs) {
        for (const auto& r : audit_params(s)) {
            std::cout << s.label() << ',' << r.stage << ',' << r.formula << ',' << r.graph << ',' << r.delta() << '\n';
            mismatches += r.delta() != 0;
        }
        note(s.label() + ": " + std::to_string(count_params(build<float>(s)).total) + " parameters");
    }
    if (mismatches) std::cerr << "error: " << mismatches << " stage(s) disagree with the closed-form count\n";
    return mismatches ? static_cast<int>(ErrorKind::numeric) : 0;
}

// ---------------------------------------------------------------------------
// run

void cmd_run(const ConfigOptions& opts, int jobs, bool dry_run)
{
    auto cfg = opts.resolve();
    if (dry_run) {
        if (!cfg.dataset.empty() && fs::is_directory(cfg.dataset)) cfg = resolve_config(cfg, read_dataset_manifest(cfg.dataset));
        std::cout << config_to_json(cfg).dump(2) << '\n';
        return;
    }
    const auto rep = run_experiment(cfg, jobs, [](int f, const EpochLog& e) {
        if (verbosity > 1)
            std::cerr << "fold " << f << " epoch " << e.epoch << " loss " << e.train_loss << " val dice " << e.val_dice
                      << (e.improved ? " *" : "") << '\n';
    });
    for (const auto& f : rep.folds)
        note("fold " + std::to_string(f.fold) + ": test Dice " + detail::fmt(mean_subject_dice(f.test)) +
             ", validation fused " + detail::fmt(mean_subject_dice(f.validation)));
    std::cout << (rep.run_dir / "report.csv").string() << '\n';
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Multi-planar 2D U-Net segmentation of 3D volumes"};
    app.require_subcommand(1);
    int verbose = 0;
    bool quiet = false;
    app.add_flag("-v,--verbose", verbose, "more progress output (repeatable)");
    app.add_flag("-q,--quiet", quiet, "errors only");

    int rc = 0;

    PhantomArgs ph;
    auto* phantom = app.add_subcommand("phantom", "write a synthetic shell-phantom dataset");
    phantom->add_option("--out", ph.out, "dataset directory")->required();
    phantom->add_option("-n,--subjects", ph.n, "number of subjects");
    phantom->add_option("--shape", ph.shape, "volume shape")->expected(3);
    phantom->add_option("--classes", ph.classes, "foreground classes");
    phantom->add_option("--noise", ph.noise, "noise standard deviation");
    phantom->add_option("--seed", ph.seed, "generator seed");
    phantom->callback([&] { cmd_phantom(ph); });

    ConfigOptions split_opts;
    auto* split = app.add_subcommand("split", "write the cross-validation fold assignment");
    split_opts.attach(*split, false);
    split->callback([&] { cmd_split(split_opts); });

    ConfigOptions train_opts;
    int train_fold_index = 0;
    auto* train = app.add_subcommand("train", "train one fold and save its checkpoint");
    train_opts.attach(*train, true);
    train->add_option("--fold", train_fold_index, "fold to train");
    train->callback([&] { cmd_train(train_opts, train_fold_index); });

    fs::path fuse_dir;
    auto* fuse_fit = app.add_subcommand("fuse-fit", "fit the fusion model on a trained fold's validation subjects");
    fuse_fit->add_option("--model-dir", fuse_dir, "fold directory written by train")->required()->check(CLI::ExistingDirectory);
    fuse_fit->callback([&] { cmd_fuse_fit(fuse_dir); });

    fs::path pred_dir, pred_image, pred_out;
    auto* predict = app.add_subcommand("predict", "segment one volume with a trained fold");
    predict->add_option("--model-dir", pred_dir, "fold directory")->required()->check(CLI::ExistingDirectory);
    predict->add_option("--image", pred_image, "intensity volume header")->required();
    predict->add_option("--out", pred_out, "output directory")->required();
    predict->callback([&] { cmd_predict(pred_dir, pred_image, pred_out); });

    fs::path eval_pred, eval_truth;
    auto* evaluate = app.add_subcommand("evaluate", "per-class Dice of a label volume against ground truth");
    evaluate->add_option("--pred", eval_pred, "predicted label volume")->required();
    evaluate->add_option("--truth", eval_truth, "reference label volume")->required();
    evaluate->callback([&] { cmd_evaluate(eval_pred, eval_truth); });

    std::vector<fs::path> stat_reports;
    std::vector<std::string> stat_names;
    std::string stat_test = "all";
    fs::path stat_out, stat_box;
    auto* stats = app.add_subcommand("stats", "pairwise p-value matrix over experiment reports");
    stats->add_option("--report", stat_reports, "report.json of a run (one per method)")->required();
    stats->add_option("--name", stat_names, "method name per report");
    stats->add_option("--test", stat_test, "rank_sum, signed_rank, paired_t or all")
        ->check(CLI::IsMember({"rank_sum", "signed_rank", "paired_t", "all"}));
    stats->add_option("--out", stat_out, "CSV path (default stdout)");
    stats->add_option("--box", stat_box, "also write box-plot summaries here");
    stats->callback([&] { cmd_stats(stat_reports, stat_names, stat_test, stat_out, stat_box); });

    ParamsArgs pa;
    auto* params = app.add_subcommand("params", "closed-form vs graph parameter count per decoder stage");
    params->add_option("--variant", pa.variant, "unet, unet2p, unet3p or all");
    params->add_option("--levels", pa.levels, "encoder levels");
    params->add_option("--base", pa.base, "base channel count");
    params->add_option("--kernel", pa.kernel, "kernel size");
    params->add_option("--in-channels", pa.in_channels, "input channels");
    params->add_option("--classes", pa.classes, "output classes including background");
    params->add_option("--cat-channels", pa.cat, "full-scale skip width");
    params->add_flag("--sqrt2", pa.sqrt2, "scale the plain U-Net widths by sqrt 2");
    params->add_flag("--deep-supervision", pa.ds, "auxiliary decoder heads");
    params->callback([&] { rc = cmd_params(pa); });

    ConfigOptions run_opts;
    int jobs = 1;
    bool dry_run = false;
    auto* run = app.add_subcommand("run", "cross-validated experiment end to end");
    run_opts.attach(*run, true);
    run->add_option("-j,--jobs", jobs, "folds trained concurrently")->check(CLI::PositiveNumber);
    run->add_flag("--dry-run", dry_run, "print the resolved config and exit");
    run->callback([&] { cmd_run(run_opts, jobs, dry_run); });

    app.parse_complete_callback([&] { verbosity = quiet ? 0 : 1 + verbose; });

    try {
        app.parse(argc, argv);
    }
    catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ErrorKind::usage);
    }
    catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(e.kind());
    }
    catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ErrorKind::data);
    }
    catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return static_cast<int>(ErrorKind::data);
    }
    return rc;
}
