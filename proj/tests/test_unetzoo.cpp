#include <gtest/gtest.h>

#include <cmath>

#include "mpunet/unetzoo.hpp"

using namespace mpunet;

namespace {

ArchSpec reference_arch(Variant v)
{
    ArchSpec a;
    a.variant = v;
    a.levels = 5;
    a.base_channels = 32;
    a.kernel = 3;
    a.in_channels = 1;
    a.num_classes = 8;
    a.sqrt2_scale = v == Variant::unet;
    return a;
}

std::int64_t half_up(double x) { return static_cast<std::int64_t>(std::floor(x + 0.5)); }

/// Hand-rolled total for the plain baseline: two conv-BN-ReLU per encoder
/// level, tconv + two conv-BN-ReLU per decoder stage, a 1x1 head.
std::int64_t unet_total_oracle(int levels, int base, bool sqrt2, int ch, int k1)
{
    std::vector<std::int64_t> d(levels);
    for (int l = 0; l < levels; ++l) d[l] = half_up(base * std::pow(2.0, l + 1) * (sqrt2 ? std::sqrt(2.0) : 1.0));
    std::int64_t total = 0;
    auto conv_bn = [&](std::int64_t cin, std::int64_t cout) { total += 9 * cin * cout + cout + 2 * cout; };
    for (int l = 0; l < levels; ++l) {
        conv_bn(l == 0 ? ch : d[l - 1], d[l]);
        conv_bn(d[l], d[l]);
    }
    for (int s = levels - 2; s >= 0; --s) {
        total += 9 * d[s + 1] * d[s] + d[s];
        conv_bn(2 * d[s], d[s]);
        conv_bn(d[s], d[s]);
    }
    return total + d[0] * k1 + k1;
}

} // namespace

TEST(ParamCount, SingleConvWithBias)
{
    nn::Graph<float> g(2);
    g.set_outputs({g.conv(g.input(), 4, 3, "s", "c")});
    const auto pc = count_params(g);
    EXPECT_EQ(pc.total, 76);
    EXPECT_EQ(pc.by_stage.at("s").kernels, 72);
    EXPECT_EQ(pc.by_stage.at("s").biases, 4);
    EXPECT_EQ(static_cast<std::int64_t>(g.parameter_count()), 76);
}

TEST(Formula, FullScaleStageHandExample)
{
    EXPECT_EQ(unet3p_stage_formula(3, 5, {32}, {320, 320, 320, 320}, 64), 1677312);
}

TEST(Formula, StageRange)
{
    const auto a = reference_arch(Variant::unet2p);
    EXPECT_NO_THROW(formula_params(a, 0));
    EXPECT_NO_THROW(formula_params(a, 3));
    EXPECT_THROW(formula_params(a, 4), UsageError);
    EXPECT_THROW(formula_params(a, -1), UsageError);
}

TEST(Formula, ChannelSchedule)
{
    auto a = reference_arch(Variant::unet2p);
    EXPECT_EQ(encoder_channels(a, 0), 64);
    EXPECT_EQ(encoder_channels(a, 4), 1024);
    a = reference_arch(Variant::unet);
    EXPECT_EQ(encoder_channels(a, 0), 91); // 64 * sqrt 2 = 90.51
    EXPECT_EQ(encoder_channels(a, 1), 181);
    a = reference_arch(Variant::unet3p);
    EXPECT_EQ(decoder_channels(a, 0), 320);
    EXPECT_EQ(decoder_channels(a, 4), 1024);
}

TEST(Audit, FormulaMatchesGraphForEveryStage)
{
    for (Variant v : {Variant::unet, Variant::unet2p, Variant::unet3p})
        for (int levels : {3, 4, 5})
            for (int base : {8, 32}) {
                ArchSpec a = reference_arch(v);
                a.levels = levels;
                a.base_channels = base;
                const auto rows = audit_params(a);
                ASSERT_EQ(rows.size(), static_cast<std::size_t>(levels - 1));
                for (const auto& r : rows) {
                    EXPECT_GT(r.formula, 0);
                    EXPECT_EQ(r.delta(), 0) << to_string(v) << " N=" << levels << " base=" << base << " stage "
                                            << r.stage;
                }
            }
}

TEST(Totals, ReferenceConfigurationIsFrozen)
{
    const auto unet = count_params(build<float>(reference_arch(Variant::unet))).total;
    const auto unet2p = count_params(build<float>(reference_arch(Variant::unet2p))).total;
    const auto unet3p = count_params(build<float>(reference_arch(Variant::unet3p))).total;
    EXPECT_EQ(unet, 69027459);
    EXPECT_EQ(unet2p, 36625608);
    EXPECT_EQ(unet3p, 26970312);
    EXPECT_GT(unet, unet2p);
    EXPECT_GT(unet2p, unet3p);
    EXPECT_LE(std::abs(unet - 62e6) / 62e6, 0.2);
    EXPECT_LE(std::abs(unet2p - 36e6) / 36e6, 0.2);
    EXPECT_LE(std::abs(unet3p - 27e6) / 27e6, 0.2);
}

TEST(Totals, BaselineMatchesHandCount)
{
    for (int levels : {3, 5})
        for (bool sqrt2 : {false, true}) {
            ArchSpec a = reference_arch(Variant::unet);
            a.levels = levels;
            a.base_channels = 8;
            a.sqrt2_scale = sqrt2;
            EXPECT_EQ(count_params(build<float>(a)).total, unet_total_oracle(levels, 8, sqrt2, 1, 8));
        }
    EXPECT_EQ(unet_total_oracle(5, 32, true, 1, 8), 69027459);
}

TEST(Totals, DeepSupervisionAddsParameters)
{
    for (Variant v : {Variant::unet2p, Variant::unet3p}) {
        ArchSpec a = reference_arch(v);
        a.base_channels = 8;
        const auto plain = count_params(build<float>(a)).total;
        a.deep_supervision = true;
        EXPECT_GT(count_params(build<float>(a)).total, plain);
    }
}

TEST(Build, ForwardShapeForAllVariants)
{
    struct Case {
        Variant v;
        bool ds;
        std::size_t outputs;
    };
    for (const auto& c : {Case{Variant::unet, false, 1}, Case{Variant::unet2p, false, 1},
                          Case{Variant::unet2p, true, 10}, Case{Variant::unet3p, false, 1},
                          Case{Variant::unet3p, true, 4}}) {
        ArchSpec a;
        a.variant = c.v;
        a.deep_supervision = c.ds;
        a.levels = 5;
        a.base_channels = 2;
        a.cat_channels = 4;
        a.in_channels = 1;
        a.num_classes = 4;
        auto g = build<float>(a);
        g.initialize(1);
        nn::Tensor4<float> x(1, 64, 64, 1, 0.5f);
        const auto outs = g.forward(x, nn::Mode::infer);
        ASSERT_EQ(outs.size(), c.outputs) << a.label();
        for (const auto* o : outs) {
            EXPECT_EQ(o->n, 1);
            EXPECT_EQ(o->h, 64);
            EXPECT_EQ(o->w, 64);
            EXPECT_EQ(o->c, 4);
        }
    }
}

TEST(ArchSpec, InvalidCombinations)
{
    ArchSpec a;
    a.variant = Variant::unet;
    a.deep_supervision = true;
    EXPECT_THROW(a.validate(), UsageError);
    EXPECT_THROW(build<float>(a), UsageError);
    a = {};
    a.levels = 1;
    EXPECT_THROW(a.validate(), UsageError);
    a = {};
    a.sqrt2_scale = true;
    EXPECT_THROW(a.validate(), UsageError);
    EXPECT_THROW(parse_variant("unet4p"), UsageError);
}

TEST(ArchSpec, JsonRoundTripRejectsUnknownFields)
{
    ArchSpec a = reference_arch(Variant::unet3p);
    a.deep_supervision = true;
    const nlohmann::json j = a;
    const auto b = j.get<ArchSpec>();
    EXPECT_EQ(nlohmann::json(b), j);
    EXPECT_EQ(b.label(), "unet3p_ds");
    auto bad = j;
    bad["depth"] = 3;
    EXPECT_THROW(bad.get<ArchSpec>(), UsageError);
}
