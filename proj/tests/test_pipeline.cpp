#include <gtest/gtest.h>

#include <set>

#include <nlohmann/json.hpp>

#include "mpunet/pipeline/experiment.hpp"
#include "test_util.hpp"

using namespace mpunet;

namespace {

std::vector<std::string> ids(int n)
{
    std::vector<std::string> v;
    for (int i = 0; i < n; ++i) v.push_back("s" + std::to_string(i));
    return v;
}

PhantomSpec tiny_phantom()
{
    PhantomSpec p;
    p.shape = {16, 16, 16};
    p.num_classes = 2;
    p.shell_radii = {0.5, 0.9};
    p.noise_sigma = 0.2;
    p.seed = 5;
    return p;
}

ExperimentConfig tiny_config(const std::filesystem::path& dataset, const std::filesystem::path& out)
{
    ExperimentConfig c;
    c.arch.variant = Variant::unet2p;
    c.arch.levels = 3;
    c.arch.base_channels = 2;
    c.planes = 3;
    c.max_epochs = 2;
    c.patience = 1;
    c.train_images_per_epoch = 8;
    c.val_images_per_epoch = 6;
    c.batch_size = 4;
    c.adam.lr = 1e-3;
    c.fusion.steps = 20;
    c.fusion.max_voxels = 2000;
    c.run_folds = {0};
    c.seed = 3;
    c.dataset = dataset.string();
    c.output = out.string();
    return c;
}

} // namespace

TEST(Folds, TenSubjectsRotation)
{
    const auto split = make_folds(ids(10), 1);
    ASSERT_EQ(split.size(), 5u);
    std::multiset<std::string> tested;
    for (const auto& f : split) {
        EXPECT_EQ(f.train.size(), 6u);
        EXPECT_EQ(f.validation.size(), 2u);
        EXPECT_EQ(f.test.size(), 2u);
        std::set<std::string> all(f.train.begin(), f.train.end());
        all.insert(f.validation.begin(), f.validation.end());
        all.insert(f.test.begin(), f.test.end());
        EXPECT_EQ(all.size(), 10u);
        tested.insert(f.test.begin(), f.test.end());
    }
    EXPECT_EQ(tested.size(), 10u);
    EXPECT_EQ(std::set<std::string>(tested.begin(), tested.end()).size(), 10u);
}

TEST(Folds, DeterministicAndUneven)
{
    EXPECT_EQ(folds_to_json(make_folds(ids(13), 9)), folds_to_json(make_folds(ids(13), 9)));
    EXPECT_NE(folds_to_json(make_folds(ids(13), 9)), folds_to_json(make_folds(ids(13), 10)));
    std::size_t tested = 0;
    for (const auto& f : make_folds(ids(13), 9)) {
        EXPECT_GE(f.test.size(), 2u);
        EXPECT_LE(f.test.size(), 3u);
        tested += f.test.size();
    }
    EXPECT_EQ(tested, 13u);
    EXPECT_THROW(make_folds(ids(4), 1), DataError);
    EXPECT_NO_THROW(make_folds(ids(5), 1));
}

TEST(EarlyStopping, StopsAfterPatienceWithoutImprovement)
{
    EarlyStopping s(1);
    EXPECT_TRUE(s.update(0.5));
    EXPECT_FALSE(s.should_stop());
    EXPECT_FALSE(s.update(0.4));
    EXPECT_TRUE(s.should_stop());
    EXPECT_EQ(s.best_epoch(), 1);
    EXPECT_EQ(s.epochs_seen(), 2);

    EarlyStopping t(2);
    t.update(0.5);
    t.update(0.5); // equal is not an improvement
    EXPECT_FALSE(t.should_stop());
    t.update(0.6);
    t.update(0.1);
    EXPECT_FALSE(t.should_stop());
    t.update(0.6);
    EXPECT_TRUE(t.should_stop());
    EXPECT_EQ(t.best_epoch(), 3);
    EXPECT_DOUBLE_EQ(t.best_score(), 0.6);
    EXPECT_THROW(EarlyStopping(0), UsageError);
}

TEST(BatchSize, HalvesUnderMemoryBudget)
{
    ExperimentConfig c;
    c.arch.num_classes = 3;
    c.arch.base_channels = 4;
    c.arch.levels = 3;
    const auto g = build<float>(c.arch);
    EXPECT_EQ(choose_batch_size(c, g, 64, 64), 16);
    const std::uint64_t fixed = 4ull * g.parameter_count() * sizeof(float);
    const std::uint64_t per = g.activation_bytes_per_sample(64, 64);
    c.memory_budget_bytes = fixed + per * 9;
    EXPECT_EQ(choose_batch_size(c, g, 64, 64), 8);
    c.memory_budget_bytes = fixed + per * 4;
    EXPECT_EQ(choose_batch_size(c, g, 64, 64), 4);
    c.memory_budget_bytes = fixed + per * 3;
    EXPECT_THROW(choose_batch_size(c, g, 64, 64), UsageError);
}

TEST(Config, JsonRoundTripAndUnknownFields)
{
    ExperimentConfig c;
    c.planes = 6;
    c.arch.variant = Variant::unet3p;
    c.arch.deep_supervision = true;
    c.adam.lr = 2e-4;
    c.affine.enabled = true;
    c.slice_size = {64, 32};
    c.seed = 77;
    ExperimentConfig d;
    apply_json(d, config_to_json(c));
    EXPECT_EQ(config_to_json(d), config_to_json(c));

    EXPECT_THROW(apply_json(d, nlohmann::json{{"epochs", 3}}), UsageError);
    EXPECT_THROW(apply_json(d, nlohmann::json{{"adam", {{"momentum", 0.9}}}}), UsageError);
    EXPECT_THROW(apply_json(d, nlohmann::json{{"arch", {{"depth", 4}}}}), UsageError);
    EXPECT_THROW(apply_json(d, nlohmann::json{{"planes", "three"}}), UsageError);
}

TEST(Config, PartialFileKeepsDefaults)
{
    testutil::TempDir dir("cfg");
    std::ofstream(dir / "c.json") << R"({"planes": 1, "adam": {"lr": 0.001}})";
    const auto c = load_config(dir / "c.json");
    EXPECT_EQ(c.planes, 1);
    EXPECT_DOUBLE_EQ(c.adam.lr, 1e-3);
    EXPECT_DOUBLE_EQ(c.adam.beta2, 0.99);
    EXPECT_EQ(c.max_epochs, 500);
    EXPECT_EQ(c.patience, 15);
    EXPECT_EQ(c.train_images_per_epoch, 2500);
    EXPECT_EQ(c.val_images_per_epoch, 3500);
    EXPECT_THROW(load_config(dir / "missing.json"), UsageError);
    std::ofstream(dir / "broken.json") << "{";
    EXPECT_THROW(load_config(dir / "broken.json"), UsageError);
}

TEST(Config, Validation)
{
    ExperimentConfig c;
    EXPECT_NO_THROW(c.validate());
    c.patience = 500;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.planes = 2;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.split = {0.5, 0.3, 0.2};
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.batch_size = 2;
    EXPECT_THROW(c.validate(), UsageError);
    c = {};
    c.run_folds = {5};
    EXPECT_THROW(c.validate(), UsageError);
}

TEST(SliceSize, RoundedToPoolingMultiple)
{
    ExperimentConfig c;
    c.arch.levels = 4;
    const Geometry g{{20, 30, 10}, {1, 1, 1}, {}};
    const auto s1 = resolve_slice_size(c, {g}, sample_plane_set(1, 0));
    EXPECT_EQ(s1, (std::array<int, 2>{32, 16}));
    const auto s3 = resolve_slice_size(c, {g}, sample_plane_set(3, 4));
    EXPECT_EQ(s3[0] % 8, 0);
    EXPECT_EQ(s3[1] % 8, 0);
    c.slice_size = {20, 0};
    EXPECT_EQ(resolve_slice_size(c, {g}, sample_plane_set(1, 0))[0], 24);
}

TEST(Dataset, PhantomManifestCountsMatchVolumes)
{
    testutil::TempDir dir("ds");
    const auto m = write_phantom_dataset(dir.path(), tiny_phantom(), 3);
    const auto read = read_dataset_manifest(dir.path());
    ASSERT_EQ(read.subjects.size(), 3u);
    EXPECT_EQ(read.num_classes, 2);
    for (const auto& s : read.subjects) {
        const auto lab = load_labels(dir / s.label);
        EXPECT_EQ(s.class_counts, count_classes(lab));
    }
    EXPECT_THROW(write_phantom_dataset(dir / "x", tiny_phantom(), 0), UsageError);
    EXPECT_THROW(read_dataset_manifest(dir / "nope"), DataError);
    std::ofstream(dir / "dataset.json") << R"({"num_classes": 2, "subjects": [{"id": "a", "image": "a.mvh"}]})";
    EXPECT_THROW(read_dataset_manifest(dir.path()), DataError);
    (void)m;
}

TEST(Predict, ConstantStubGivesConstantVolumes)
{
    nn::Graph<float> g(1);
    g.set_outputs({g.conv(g.input(), 3, 1, "head", "out")});
    g.initialize(0);
    g.params()[0].value.assign(3, 0.0f);
    g.params()[1].value = {0.5f, 1.0f, -1.0f};
    IntensityVolume v(Geometry{{6, 7, 8}, {1, 1, 1}, {}});
    for (int k : {1, 3}) {
        const auto ps = sample_plane_set(k, 2);
        const auto probs = predict_subject(g, v, ps, {8, 8});
        ASSERT_EQ(probs.size(), static_cast<std::size_t>(k));
        if (k != 1) continue;
        const double e0 = std::exp(0.5), e1 = std::exp(1.0), e2 = std::exp(-1.0), s = e0 + e1 + e2;
        for (std::size_t n = 0; n < v.geom.voxel_count(); ++n) {
            EXPECT_NEAR(probs[0].data[n * 3 + 0], e0 / s, 1e-6);
            EXPECT_NEAR(probs[0].data[n * 3 + 1], e1 / s, 1e-6);
            EXPECT_NEAR(probs[0].data[n * 3 + 2], e2 / s, 1e-6);
        }
    }
    IntensityVolume two(Geometry{{4, 4, 4}, {1, 1, 1}, {}}, 2);
    EXPECT_THROW(predict_subject(g, two, sample_plane_set(1, 0), {8, 8}), DataError);
}

TEST(Training, ReturnsBestCheckpointAndIsDeterministic)
{
    testutil::TempDir dir("train");
    write_phantom_dataset(dir / "ds", tiny_phantom(), 5);
    const auto m = read_dataset_manifest(dir / "ds");
    auto cfg = resolve_config(tiny_config(dir / "ds", dir / "out"), m);
    cfg.max_epochs = 3;
    cfg.patience = 2;
    const auto train = load_subjects(dir / "ds", m, {"sub000", "sub001", "sub002"});
    const auto val = load_subjects(dir / "ds", m, {"sub003"});
    const auto ps = sample_plane_set(3, 11);
    std::vector<Geometry> geoms{train[0].image.geom};
    const auto size = resolve_slice_size(cfg, geoms, ps);
    int callbacks = 0;
    auto a = train_fold(cfg, train, val, ps, size, 42, [&](const EpochLog&) { ++callbacks; });
    auto b = train_fold(cfg, train, val, ps, size, 42);
    ASSERT_FALSE(a.log.empty());
    EXPECT_EQ(callbacks, static_cast<int>(a.log.size()));
    ASSERT_EQ(a.log.size(), b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
        EXPECT_EQ(a.log[i].val_dice, b.log[i].val_dice);
    }
    double best = -1.0;
    for (const auto& e : a.log) best = std::max(best, e.val_dice);
    EXPECT_EQ(a.best_dice, best);
    EXPECT_EQ(a.log[a.best_epoch - 1].val_dice, best);

    // The returned weights reproduce the best epoch's validation Dice.
    const auto bank = build_slice_bank(val, ps, size, cfg.grid_spacing);
    Rng val_rng(derive_seed(42, 2));
    std::vector<SliceRef> refs(static_cast<std::size_t>(cfg.val_images_per_epoch));
    for (auto& r : refs) r = draw_slice(bank, val_rng);
    EXPECT_EQ(validation_dice(a.graph, bank, refs, a.batch_size), best);
}

TEST(Experiment, ReportSchemaAndDeterminism)
{
    testutil::TempDir dir("exp");
    write_phantom_dataset(dir / "ds", tiny_phantom(), 5);
    auto cfg = tiny_config(dir / "ds", dir / "run1");
    const auto rep = run_experiment(cfg);
    const auto run = dir / "run1" / "seed_3";
    for (const char* f : {"manifest.json", "report.json", "report.csv", "timing.json", "fold_0/model.json",
                          "fold_0/model.bin", "fold_0/fusion.json", "fold_0/training_log.csv"})
        EXPECT_TRUE(std::filesystem::exists(run / f)) << f;

    EXPECT_EQ(rep.params, count_params(build<float>(rep.config.arch)).total);
    EXPECT_EQ(rep.config.arch.num_classes, 3);
    ASSERT_EQ(rep.folds.size(), 1u);
    EXPECT_LE(rep.folds[0].fusion_fitted_loss, rep.folds[0].fusion_uniform_loss);
    EXPECT_EQ(rep.folds[0].test.size(), 1u);
    EXPECT_EQ(rep.folds[0].validation.size(), 1u);

    const auto csv = testutil::read_file(run / "report.csv");
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    EXPECT_EQ(line, "arch,planes,fold,scope,class,dice,subjects,params");
    int fold_rows = 0, aggregate_rows = 0, class_rows = 0;
    while (std::getline(lines, line)) {
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 7) << line;
        fold_rows += line.find(",fold,") != std::string::npos;
        aggregate_rows += line.find(",aggregate,") != std::string::npos;
        class_rows += line.find(",class_mean,") != std::string::npos;
    }
    EXPECT_EQ(fold_rows, 3); // two classes plus the fold mean
    EXPECT_EQ(class_rows, 2);
    EXPECT_EQ(aggregate_rows, 1);
    const auto j = nlohmann::json::parse(testutil::read_file(run / "report.json"));
    EXPECT_EQ(j.at("params").get<std::int64_t>(), rep.params);
    EXPECT_EQ(j.at("folds").size(), 1u);

    // Same seed, fresh directory, folds on two threads: identical artifacts.
    cfg.output = (dir / "run2").string();
    run_experiment(cfg, 2);
    const auto run2 = dir / "run2" / "seed_3";
    for (const char* f : {"manifest.json", "report.json", "report.csv", "fold_0/model.bin", "fold_0/fusion.json",
                          "fold_0/training_log.csv"}) {
        auto a = testutil::read_file(run / f), b = testutil::read_file(run2 / f);
        if (std::string(f) == "manifest.json") {
            auto ja = nlohmann::json::parse(a), jb = nlohmann::json::parse(b);
            ja["config"].erase("output");
            jb["config"].erase("output");
            EXPECT_EQ(ja, jb);
            continue;
        }
        EXPECT_EQ(a, b) << f;
    }
}

TEST(Experiment, MissingDatasetNamesThePath)
{
    testutil::TempDir dir("exp");
    auto cfg = tiny_config(dir / "nowhere", dir / "out");
    try {
        run_experiment(cfg);
        FAIL() << "expected DataError";
    }
    catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("nowhere"), std::string::npos);
    }
}
