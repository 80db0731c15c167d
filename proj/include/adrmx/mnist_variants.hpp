#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "adrmx/data.hpp"
#include "adrmx/digits.hpp"
#include "adrmx/error.hpp"
#include "adrmx/rng.hpp"
#include "adrmx/warnings.hpp"

namespace adrmx {

/// Rotate a square grayscale image about its center by `angle_deg`
/// (counterclockwise in standard image axes), bilinear interpolation with
/// zero padding. angle 0 reproduces the input bit-exactly.
inline std::vector<double> rotate_image(const std::vector<double>& image, std::size_t side, double angle_deg) {
    if (image.size() != side * side) {
        throw ShapeError("rotate_image: " + std::to_string(image.size()) + " pixels for side " +
                         std::to_string(side));
    }
    const double rad = angle_deg * 3.14159265358979323846 / 180.0;
    const double c = std::cos(rad), s = std::sin(rad);
    const double center = (static_cast<double>(side) - 1.0) / 2.0;
    std::vector<double> out(image.size(), 0.0);
    for (std::size_t row = 0; row < side; ++row) {
        for (std::size_t col = 0; col < side; ++col) {
            // inverse map: rotate the output pixel back into source coords
            const double dx = static_cast<double>(col) - center;
            const double dy = static_cast<double>(row) - center;
            const double src_x = center + c * dx + s * dy;
            const double src_y = center - s * dx + c * dy;
            const double fx = std::floor(src_x), fy = std::floor(src_y);
            const double wx = src_x - fx, wy = src_y - fy;
            double acc = 0.0;
            for (int oy = 0; oy <= 1; ++oy) {
                for (int ox = 0; ox <= 1; ++ox) {
                    const double weight = (ox ? wx : 1.0 - wx) * (oy ? wy : 1.0 - wy);
                    if (weight == 0.0) continue;
                    const double xi = fx + ox, yi = fy + oy;
                    if (xi < 0.0 || yi < 0.0 || xi >= static_cast<double>(side) ||
                        yi >= static_cast<double>(side)) {
                        continue;  // zero padding
                    }
                    acc += weight *
                           image[static_cast<std::size_t>(yi) * side + static_cast<std::size_t>(xi)];
                }
            }
            out[row * side + col] = acc;
        }
    }
    return out;
}

inline constexpr double kColoredMnistDefaultCorrelations[3] = {0.9, 0.8, -0.9};

/// ColoredMNIST construction: binarize the digit label, flip it with
/// probability label_noise, then give each domain a color channel that
/// agrees with the noisy label at that domain's signed correlation. Output
/// images are two-channel (channel-major), one channel live, one zero.
inline MultiDomainTask make_colored_mnist(const std::vector<double>& base_images,
                                          const std::vector<int>& base_labels, std::uint64_t seed,
                                          double label_noise = 0.25,
                                          std::vector<double> correlations = {0.9, 0.8, -0.9}) {
    const std::size_t count = base_labels.size();
    if (count == 0) throw ConfigError("make_colored_mnist: empty base set");
    if (base_images.size() != count * kDigitImagePixels) {
        throw ShapeError("make_colored_mnist: expected " + std::to_string(count * kDigitImagePixels) +
                         " pixels, got " + std::to_string(base_images.size()));
    }
    if (label_noise < 0.0 || label_noise >= 0.5) {
        throw ConfigError("make_colored_mnist: label_noise must lie in [0, 0.5)");
    }
    if (correlations.size() < 2) throw ConfigError("make_colored_mnist: need at least 2 domains");
    for (const double rho : correlations) {
        if (std::abs(rho) > 1.0) throw ConfigError("make_colored_mnist: correlation outside [-1, 1]");
    }

    const std::size_t num_domains = correlations.size();
    const std::size_t per_domain = count / num_domains;
    if (per_domain == 0) throw ConfigError("make_colored_mnist: fewer base digits than domains");

    MultiDomainTask task;
    task.target_index = num_domains - 1;
    const std::size_t channel = kDigitImagePixels;
    for (std::size_t d = 0; d < num_domains; ++d) {
        Rng rng(derive_seed(seed, "colored-mnist", d));
        const double rho = correlations[d];

        DomainDataset ds;
        ds.domain_id = static_cast<int>(d);
        const int percent = static_cast<int>(std::lround(rho * 100.0));
        ds.domain_name = (percent >= 0 ? "+" : "") + std::to_string(percent) + "%";
        ds.num_classes = 2;
        ds.inputs = Tensor::zeros({per_domain, 2 * channel});
        ds.labels.resize(per_domain);
        for (std::size_t i = 0; i < per_domain; ++i) {
            const std::size_t base_row = d * per_domain + i;  // disjoint chunk per domain
            int label = base_labels[base_row] < 5 ? 0 : 1;
            if (rng.uniform01() < label_noise) label = 1 - label;
            const bool agree = rng.uniform01() < std::abs(rho);
            const int aligned = rho >= 0.0 ? label : 1 - label;
            const int color = agree ? aligned : 1 - aligned;

            ds.labels[i] = label;
            double* row = ds.inputs.data.data() + i * 2 * channel;
            const double* pixels = base_images.data() + base_row * channel;
            std::copy_n(pixels, channel, row + static_cast<std::size_t>(color) * channel);
        }
        task.domains.push_back(std::move(ds));
    }
    if (num_domains >= 3) task.validate();
    return task;
}

/// RotatedMNIST construction: each domain is a disjoint subset of the base
/// digits rotated by that domain's angle. Ten classes throughout.
inline MultiDomainTask make_rotated_mnist(const std::vector<double>& base_images,
                                          const std::vector<int>& base_labels,
                                          std::vector<double> angles = {0, 15, 30, 45, 60, 75},
                                          std::size_t subset_per_domain = 0, std::uint64_t seed = 0) {
    const std::size_t count = base_labels.size();
    if (count == 0) throw ConfigError("make_rotated_mnist: empty base set");
    if (base_images.size() != count * kDigitImagePixels) {
        throw ShapeError("make_rotated_mnist: expected " + std::to_string(count * kDigitImagePixels) +
                         " pixels, got " + std::to_string(base_images.size()));
    }
    if (angles.size() < 3) throw ConfigError("make_rotated_mnist: need at least 3 angles");
    for (std::size_t i = 0; i < angles.size(); ++i) {
        for (std::size_t j = i + 1; j < angles.size(); ++j) {
            if (angles[i] == angles[j]) throw ConfigError("make_rotated_mnist: angles must be distinct");
        }
        if (angles[i] < 0.0 || angles[i] > 90.0) {
            emit_warning("rotation angle " + std::to_string(angles[i]) + " lies outside [0, 90] degrees");
        }
    }
    const std::size_t num_domains = angles.size();
    if (subset_per_domain == 0) subset_per_domain = count / num_domains;
    if (subset_per_domain * num_domains > count) {
        throw ConfigError("make_rotated_mnist: " + std::to_string(subset_per_domain * num_domains) +
                          " digits requested, base set holds " + std::to_string(count));
    }

    // One global shuffle so each domain's chunk mixes all writer styles.
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seed, "rotated-mnist"));
    rng.shuffle(order);

    MultiDomainTask task;
    task.target_index = num_domains - 1;
    for (std::size_t d = 0; d < num_domains; ++d) {
        DomainDataset ds;
        ds.domain_id = static_cast<int>(d);
        ds.domain_name = std::to_string(static_cast<int>(std::lround(angles[d]))) + "deg";
        ds.num_classes = 10;
        ds.inputs = Tensor::zeros({subset_per_domain, kDigitImagePixels});
        ds.labels.resize(subset_per_domain);
        for (std::size_t i = 0; i < subset_per_domain; ++i) {
            const std::size_t base_row = order[d * subset_per_domain + i];
            std::vector<double> img(base_images.begin() + static_cast<std::ptrdiff_t>(base_row * kDigitImagePixels),
                                    base_images.begin() +
                                        static_cast<std::ptrdiff_t>((base_row + 1) * kDigitImagePixels));
            const std::vector<double> rotated = rotate_image(img, kDigitImageSide, angles[d]);
            std::copy(rotated.begin(), rotated.end(),
                      ds.inputs.data.begin() + static_cast<std::ptrdiff_t>(i * kDigitImagePixels));
            ds.labels[i] = base_labels[base_row];
        }
        task.domains.push_back(std::move(ds));
    }
    task.validate();
    return task;
}

}  // namespace adrmx
