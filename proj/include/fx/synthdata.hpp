#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fx/boxes.hpp"
#include "fx/metrics.hpp"
#include "fx/tensor.hpp"

namespace fx {

inline constexpr std::size_t kMinImageSize = 12;

/// Procedural dataset description. Each shape class doubles as an annotation
/// class, optionally renamed through class_names; optional subtasks split a
/// task into one head per listed class name.
struct SynthDatasetSpec {
    std::string id;
    std::size_t num_images = 200;
    std::size_t image_size = 32;
    std::vector<std::string> shape_classes{"ellipse", "rectangle", "ring"};
    std::vector<std::string> class_names;  // empty: same as shape_classes
    std::vector<TaskKind> tasks{TaskKind::Cls};
    std::map<TaskKind, std::vector<std::string>> subtasks;
    double noise_level = 0.05;
    std::uint64_t seed = 0;

    bool has_task(TaskKind t) const;
    std::size_t num_classes() const { return shape_classes.size(); }
    const std::string& class_name(std::size_t c) const;
    /// Index of a class by display name; throws std::invalid_argument.
    std::size_t class_index(const std::string& name) const;
    /// Subtask names of a task; a single empty string when the task is not split.
    std::vector<std::string> subtasks_of(TaskKind t) const;
    /// Throws std::invalid_argument describing the first violated constraint.
    void validate() const;
};

struct SynthSample {
    Tensor image;                   // 1 x H x W, values in [0,1]
    std::optional<Tensor> labels;   // C, entries 0/1
    std::optional<BoxTarget> boxes;
    std::optional<Tensor> mask;     // C x H x W, entries 0/1
};

std::vector<SynthSample> generate_dataset(const SynthDatasetSpec& spec);

SynthSample flip_horizontal(const SynthSample& sample);

/// Horizontal flip with probability 1/2, then additive Gaussian pixel noise
/// clipped to [0,1]. Labels are untouched; boxes and masks follow the flip.
SynthSample augment(const SynthSample& sample, std::uint64_t seed, double noise_level);

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

struct SplitFractions {
    double train = 0.70;
    double val = 0.10;
    double test = 0.20;
};

/// Seeded disjoint partition of [0, n). Throws for n < 3 or fractions not summing to 1.
SplitIndices split(std::size_t n, std::uint64_t seed, SplitFractions fractions = {});

/// k distinct members of `pool`, kept in pool order. Throws std::invalid_argument when k > pool size.
std::vector<std::size_t> few_shot_subset(const std::vector<std::size_t>& pool, std::size_t k, std::uint64_t seed);

/// Writes manifest.json plus raw little-endian arrays into `dir`.
void save_dataset(const std::filesystem::path& dir, const SynthDatasetSpec& spec, const std::vector<SynthSample>& samples);

struct LoadedDataset {
    SynthDatasetSpec spec;
    std::vector<SynthSample> samples;
};

LoadedDataset load_dataset(const std::filesystem::path& dir);

}  // namespace fx
