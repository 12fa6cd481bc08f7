#include "fx/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "fx/binary_io.hpp"
#include "fx/config.hpp"
#include "fx/hash.hpp"

namespace fx {
namespace {

constexpr std::size_t kMaxInstances = 3;
constexpr std::size_t kMinExtent = 8;
constexpr std::size_t kMinRingExtent = 10;
constexpr double kBackground = 0.1;

enum class Shape2D { Ellipse, Rectangle, Ring };

Shape2D parse_shape(const std::string& name) {
    if (name == "ellipse") return Shape2D::Ellipse;
    if (name == "rectangle") return Shape2D::Rectangle;
    if (name == "ring") return Shape2D::Ring;
    throw std::invalid_argument("unknown shape class '" + name + "' (expected ellipse, rectangle or ring)");
}

struct PixelRect {
    std::size_t x0, y0, w, h;
};

bool overlaps(const PixelRect& a, const PixelRect& b) {
    // One-pixel gap keeps instance masks and boxes separable.
    return a.x0 < b.x0 + b.w + 1 && b.x0 < a.x0 + a.w + 1 && a.y0 < b.y0 + b.h + 1 && b.y0 < a.y0 + a.h + 1;
}

bool inside(Shape2D shape, const PixelRect& r, std::size_t x, std::size_t y) {
    if (shape == Shape2D::Rectangle) return true;
    const double a = static_cast<double>(r.w) / 2.0, b = static_cast<double>(r.h) / 2.0;
    const double dx = static_cast<double>(x - r.x0) + 0.5 - a;
    const double dy = static_cast<double>(y - r.y0) + 0.5 - b;
    const double outer = (dx * dx) / (a * a) + (dy * dy) / (b * b);
    if (outer > 1.0) return false;
    if (shape == Shape2D::Ellipse) return true;
    const double t = std::max(2.0, 0.4 * std::min(a, b));
    const double ia = a - t, ib = b - t;
    return (dx * dx) / (ia * ia) + (dy * dy) / (ib * ib) > 1.0;
}

SynthSample generate_one(const SynthDatasetSpec& spec, const std::vector<Shape2D>& shapes, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, spec.noise_level);
    const std::size_t n = spec.image_size, nc = spec.num_classes();
    const std::size_t max_extent = std::max(kMinRingExtent, static_cast<std::size_t>(0.45 * static_cast<double>(n)));

    SynthSample s;
    s.image = Tensor({1, n, n}, 0.0);
    for (auto& v : s.image.data()) v = std::clamp(kBackground + noise(rng), 0.0, 1.0);

    Tensor labels({nc}, 0.0);
    Tensor mask({nc, n, n}, 0.0);
    BoxTarget boxes;

    const std::size_t count = rng() % (kMaxInstances + 1);
    std::vector<PixelRect> placed;
    for (std::size_t k = 0; k < count; ++k) {
        const std::size_t cls = rng() % nc;
        const Shape2D shape = shapes[cls];
        const std::size_t lo = shape == Shape2D::Ring ? kMinRingExtent : kMinExtent;
        const double intensity = 0.6 + 0.4 * unit(rng);
        std::optional<PixelRect> rect;
        for (int attempt = 0; attempt < 20 && !rect; ++attempt) {
            const std::size_t w = lo + rng() % (max_extent - lo + 1);
            const std::size_t h = lo + rng() % (max_extent - lo + 1);
            PixelRect r{rng() % (n - w + 1), rng() % (n - h + 1), w, h};
            if (std::none_of(placed.begin(), placed.end(), [&](const PixelRect& p) { return overlaps(p, r); })) rect = r;
        }
        if (!rect) continue;
        placed.push_back(*rect);

        std::size_t x_min = n, x_max = 0, y_min = n, y_max = 0;
        for (std::size_t y = rect->y0; y < rect->y0 + rect->h; ++y)
            for (std::size_t x = rect->x0; x < rect->x0 + rect->w; ++x) {
                if (!inside(shape, *rect, x, y)) continue;
                s.image[y * n + x] = std::clamp(intensity + noise(rng), 0.0, 1.0);
                mask[(cls * n + y) * n + x] = 1.0;
                x_min = std::min(x_min, x), x_max = std::max(x_max, x);
                y_min = std::min(y_min, y), y_max = std::max(y_max, y);
            }
        labels[cls] = 1.0;
        const double fn = static_cast<double>(n);
        boxes.boxes.push_back({static_cast<double>(x_min + x_max + 1) / 2.0 / fn, static_cast<double>(y_min + y_max + 1) / 2.0 / fn,
                               static_cast<double>(x_max + 1 - x_min) / fn, static_cast<double>(y_max + 1 - y_min) / fn});
        boxes.class_ids.push_back(cls);
    }

    if (spec.has_task(TaskKind::Cls)) s.labels = std::move(labels);
    if (spec.has_task(TaskKind::Loc)) s.boxes = std::move(boxes);
    if (spec.has_task(TaskKind::Seg)) s.mask = std::move(mask);
    return s;
}

}  // namespace

bool SynthDatasetSpec::has_task(TaskKind t) const { return std::find(tasks.begin(), tasks.end(), t) != tasks.end(); }

const std::string& SynthDatasetSpec::class_name(std::size_t c) const {
    return class_names.empty() ? shape_classes.at(c) : class_names.at(c);
}

std::size_t SynthDatasetSpec::class_index(const std::string& name) const {
    for (std::size_t c = 0; c < num_classes(); ++c)
        if (class_name(c) == name) return c;
    throw std::invalid_argument("dataset '" + id + "' has no class '" + name + "'");
}

std::vector<std::string> SynthDatasetSpec::subtasks_of(TaskKind t) const {
    auto it = subtasks.find(t);
    if (it == subtasks.end()) return {std::string()};
    return it->second;
}

void SynthDatasetSpec::validate() const {
    if (id.empty()) throw std::invalid_argument("dataset id must not be empty");
    if (num_images < 1) throw std::invalid_argument("dataset '" + id + "': num_images must be at least 1");
    if (tasks.empty()) throw std::invalid_argument("dataset '" + id + "': at least one task is required");
    if (std::set<TaskKind>(tasks.begin(), tasks.end()).size() != tasks.size())
        throw std::invalid_argument("dataset '" + id + "': duplicate task");
    if (shape_classes.empty()) throw std::invalid_argument("dataset '" + id + "': shape_classes must not be empty");
    if (std::set<std::string>(shape_classes.begin(), shape_classes.end()).size() != shape_classes.size())
        throw std::invalid_argument("dataset '" + id + "': duplicate shape class");
    for (const auto& c : shape_classes) parse_shape(c);
    if (!class_names.empty()) {
        if (class_names.size() != shape_classes.size())
            throw std::invalid_argument("dataset '" + id + "': class_names must match shape_classes in length");
        if (std::set<std::string>(class_names.begin(), class_names.end()).size() != class_names.size())
            throw std::invalid_argument("dataset '" + id + "': duplicate class name");
    }
    if (image_size < kMinImageSize)
        throw std::invalid_argument("dataset '" + id + "': image_size " + std::to_string(image_size) +
                                    " too small to fit the minimum shape (need >= " + std::to_string(kMinImageSize) + ")");
    if (!(noise_level >= 0.0 && std::isfinite(noise_level)))
        throw std::invalid_argument("dataset '" + id + "': noise_level must be a non-negative number");
    for (const auto& [task, names] : subtasks) {
        if (!has_task(task))
            throw std::invalid_argument("dataset '" + id + "': subtasks given for absent task '" + to_string(task) + "'");
        if (names.empty()) throw std::invalid_argument("dataset '" + id + "': empty subtask list");
        for (const auto& n : names) class_index(n);
        if (std::set<std::string>(names.begin(), names.end()).size() != names.size())
            throw std::invalid_argument("dataset '" + id + "': duplicate subtask");
    }
}

std::vector<SynthSample> generate_dataset(const SynthDatasetSpec& spec) {
    spec.validate();
    std::vector<Shape2D> shapes;
    for (const auto& c : spec.shape_classes) shapes.push_back(parse_shape(c));
    std::vector<SynthSample> out;
    out.reserve(spec.num_images);
    for (std::size_t i = 0; i < spec.num_images; ++i) out.push_back(generate_one(spec, shapes, derive_seed(spec.seed, i)));
    return out;
}

SynthSample flip_horizontal(const SynthSample& sample) {
    SynthSample out = sample;
    auto flip_planes = [](Tensor& t) {
        const std::size_t w = t.dim(t.rank() - 1);
        const std::size_t rows = t.numel() / w;
        for (std::size_t r = 0; r < rows; ++r) std::reverse(t.data().begin() + static_cast<std::ptrdiff_t>(r * w),
                                                            t.data().begin() + static_cast<std::ptrdiff_t>((r + 1) * w));
    };
    flip_planes(out.image);
    if (out.mask) flip_planes(*out.mask);
    if (out.boxes)
        for (auto& b : out.boxes->boxes) b.cx = 1.0 - b.cx;
    return out;
}

SynthSample augment(const SynthSample& sample, std::uint64_t seed, double noise_level) {
    std::mt19937_64 rng(seed);
    SynthSample out = (rng() & 1ULL) ? flip_horizontal(sample) : sample;
    if (noise_level > 0.0) {
        std::normal_distribution<double> noise(0.0, noise_level);
        for (auto& v : out.image.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
    }
    return out;
}

SplitIndices split(std::size_t n, std::uint64_t seed, SplitFractions f) {
    if (n < 3) throw std::invalid_argument("split: dataset of size " + std::to_string(n) + " is smaller than 3");
    if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9)
        throw std::invalid_argument("split: fractions must be non-negative and sum to 1");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto nd = static_cast<double>(n);
    const auto n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(f.train * nd)));
    const auto n_val = std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(f.val * nd)));
    SplitIndices out;
    out.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    out.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
    for (auto* part : {&out.train, &out.val, &out.test}) std::sort(part->begin(), part->end());
    return out;
}

std::vector<std::size_t> few_shot_subset(const std::vector<std::size_t>& pool, std::size_t k, std::uint64_t seed) {
    if (k > pool.size())
        throw std::invalid_argument("few_shot_subset: k=" + std::to_string(k) + " exceeds pool of " + std::to_string(pool.size()));
    std::vector<std::size_t> pos(pool.size());
    std::iota(pos.begin(), pos.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(pos.begin(), pos.end(), rng);
    pos.resize(k);
    std::sort(pos.begin(), pos.end());
    std::vector<std::size_t> out;
    out.reserve(k);
    for (auto p : pos) out.push_back(pool[p]);
    return out;
}

void save_dataset(const std::filesystem::path& dir, const SynthDatasetSpec& spec, const std::vector<SynthSample>& samples) {
    std::filesystem::create_directories(dir);
    std::vector<char> images, labels, masks, box_counts, boxes, box_classes;
    for (const auto& s : samples) {
        for (double v : s.image.data()) binary::append_le(images, v);
        if (s.labels)
            for (double v : s.labels->data()) binary::append_le(labels, v);
        if (s.mask)
            for (double v : s.mask->data()) binary::append_le(masks, static_cast<std::uint8_t>(v > 0.5));
        if (s.boxes) {
            binary::append_le(box_counts, static_cast<std::uint32_t>(s.boxes->size()));
            for (std::size_t j = 0; j < s.boxes->size(); ++j) {
                const auto& b = s.boxes->boxes[j];
                for (double v : {b.cx, b.cy, b.w, b.h}) binary::append_le(boxes, v);
                binary::append_le(box_classes, static_cast<std::uint32_t>(s.boxes->class_ids[j]));
            }
        }
    }
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["spec"] = dataset_spec_to_json(spec);
    manifest["num_samples"] = samples.size();
    nlohmann::json files;
    files["images"] = "images.f64";
    binary::write_file(dir / "images.f64", images);
    if (spec.has_task(TaskKind::Cls)) {
        files["labels"] = "labels.f64";
        binary::write_file(dir / "labels.f64", labels);
    }
    if (spec.has_task(TaskKind::Seg)) {
        files["masks"] = "masks.u8";
        binary::write_file(dir / "masks.u8", masks);
    }
    if (spec.has_task(TaskKind::Loc)) {
        files["box_counts"] = "box_counts.u32";
        files["boxes"] = "boxes.f64";
        files["box_classes"] = "box_classes.u32";
        binary::write_file(dir / "box_counts.u32", box_counts);
        binary::write_file(dir / "boxes.f64", boxes);
        binary::write_file(dir / "box_classes.u32", box_classes);
    }
    manifest["files"] = files;
    const auto text = manifest.dump(2) + "\n";
    binary::write_file(dir / "manifest.json", text);
}

LoadedDataset load_dataset(const std::filesystem::path& dir) {
    const auto raw = binary::read_file(dir / "manifest.json");
    const auto manifest = nlohmann::json::parse(raw.begin(), raw.end());
    LoadedDataset out;
    out.spec = dataset_spec_from_json(manifest.at("spec"), "spec");
    const std::size_t n = manifest.at("num_samples").get<std::size_t>();
    const std::size_t hw = out.spec.image_size * out.spec.image_size, nc = out.spec.num_classes();

    const auto images = binary::read_file(dir / "images.f64");
    std::vector<char> labels, masks, counts, boxes, classes;
    if (out.spec.has_task(TaskKind::Cls)) labels = binary::read_file(dir / "labels.f64");
    if (out.spec.has_task(TaskKind::Seg)) masks = binary::read_file(dir / "masks.u8");
    if (out.spec.has_task(TaskKind::Loc)) {
        counts = binary::read_file(dir / "box_counts.u32");
        boxes = binary::read_file(dir / "boxes.f64");
        classes = binary::read_file(dir / "box_classes.u32");
    }
    std::size_t box_cursor = 0;
    for (std::size_t i = 0; i < n; ++i) {
        SynthSample s;
        s.image = Tensor({1, out.spec.image_size, out.spec.image_size});
        for (std::size_t k = 0; k < hw; ++k) s.image[k] = binary::read_le<double>(images, (i * hw + k) * 8);
        if (!labels.empty()) {
            s.labels = Tensor({nc});
            for (std::size_t c = 0; c < nc; ++c) (*s.labels)[c] = binary::read_le<double>(labels, (i * nc + c) * 8);
        }
        if (!masks.empty()) {
            s.mask = Tensor({nc, out.spec.image_size, out.spec.image_size});
            for (std::size_t k = 0; k < nc * hw; ++k) (*s.mask)[k] = binary::read_le<std::uint8_t>(masks, i * nc * hw + k);
        }
        if (out.spec.has_task(TaskKind::Loc)) {
            BoxTarget t;
            const auto count = binary::read_le<std::uint32_t>(counts, i * 4);
            for (std::uint32_t j = 0; j < count; ++j, ++box_cursor) {
                Box b{binary::read_le<double>(boxes, box_cursor * 32), binary::read_le<double>(boxes, box_cursor * 32 + 8),
                      binary::read_le<double>(boxes, box_cursor * 32 + 16), binary::read_le<double>(boxes, box_cursor * 32 + 24)};
                t.boxes.push_back(b);
                t.class_ids.push_back(binary::read_le<std::uint32_t>(classes, box_cursor * 4));
            }
            s.boxes = std::move(t);
        }
        out.samples.push_back(std::move(s));
    }
    return out;
}

}  // namespace fx
