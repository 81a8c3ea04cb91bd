// Parameter totals of the three decoders at full size, with the per-stage
// closed-form check.
#include <cstdio>

#include "mpunet/unetzoo.hpp"

int main()
{
    using namespace mpunet;
    for (Variant v : {Variant::unet, Variant::unet2p, Variant::unet3p}) {
        ArchSpec a;
        a.variant = v;
        a.levels = 5;
        a.base_channels = 32;
        a.num_classes = 8;
        a.sqrt2_scale = v == Variant::unet;
        const auto total = count_params(build<float>(a)).total;
        std::printf("%-7s %12lld parameters\n", a.label().c_str(), static_cast<long long>(total));
        for (const auto& r : audit_params(a))
            std::printf("  stage %d formula %10lld graph %10lld\n", r.stage, static_cast<long long>(r.formula),
                        static_cast<long long>(r.graph));
    }
}
