// Writes a phantom, slices it along three random views and maps the one-hot
// labels back onto the voxel grid, printing per-view agreement.
#include <cstdio>

#include "mpunet/multiplanar.hpp"
#include "mpunet/phantom.hpp"

int main()
{
    using namespace mpunet;
    PhantomSpec spec;
    spec.shape = {32, 32, 32};
    const auto [img, lab] = make_phantom(spec);
    const auto ps = sample_plane_set(3, 1);
    const int classes = spec.num_classes + 1;
    for (std::size_t v = 0; v < ps.size(); ++v) {
        const auto st = extract_slices(img, &lab, ps, static_cast<int>(v), {48, 48}, 1.0);
        const auto back = argmax_labels(map_back(one_hot(st.labels, classes), classes, st.grid, lab.geom));
        std::size_t same = 0;
        for (std::size_t i = 0; i < lab.data.size(); ++i) same += back.data[i] == lab.data[i];
        std::printf("view %zu (%.3f %.3f %.3f): %.4f agreement\n", v, ps.vectors[v][0], ps.vectors[v][1],
                    ps.vectors[v][2], static_cast<double>(same) / lab.data.size());
    }
}
