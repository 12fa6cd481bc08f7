#include "fx/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <stdexcept>

#include "fx/hash.hpp"

namespace fx {
namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

std::vector<std::pair<double, double>> anchor_centers(std::size_t q) {
    const std::size_t rows = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(q)))));
    std::vector<std::pair<double, double>> out;
    for (std::size_t r = 0; r < rows; ++r) {
        const std::size_t n = q / rows + (r < q % rows ? 1 : 0);
        for (std::size_t j = 0; j < n; ++j)
            out.emplace_back((static_cast<double>(j) + 0.5) / static_cast<double>(n),
                             (static_cast<double>(r) + 0.5) / static_cast<double>(rows));
    }
    return out;
}

std::string family_prefix(const ComponentId& id) {
    switch (id.kind) {
        case ComponentKind::Backbone: return "backbone";
        case ComponentKind::LocEncoder: return "loc_encoder";
        case ComponentKind::SegDecoder: return "seg_decoder";
        case ComponentKind::ClsHead: return "cls_head." + std::to_string(id.index);
        case ComponentKind::LocDecoder: return "loc_decoder." + std::to_string(id.index);
        case ComponentKind::SegHead: return "seg_head." + std::to_string(id.index);
    }
    return "?";
}

ComponentKind family_of(TaskKind task) {
    switch (task) {
        case TaskKind::Cls: return ComponentKind::ClsHead;
        case TaskKind::Loc: return ComponentKind::LocDecoder;
        case TaskKind::Seg: return ComponentKind::SegHead;
    }
    return ComponentKind::ClsHead;
}

Var linear(Binder& bind, Var x, const std::string& prefix) {
    return add(matmul(x, bind(prefix + ".weight")), bind(prefix + ".bias"));
}

Var conv(Binder& bind, Var x, const std::string& prefix, std::size_t pad) {
    return conv2d(x, bind(prefix + ".weight"), bind(prefix + ".bias"), pad);
}

}  // namespace

void ArchConfig::validate() const {
    auto positive = [](std::size_t v, const char* field) {
        if (v == 0) throw std::invalid_argument(std::string("arch.") + field + " must be positive");
    };
    positive(image_size, "image_size");
    positive(in_channels, "in_channels");
    positive(stage1_channels, "stage1_channels");
    positive(stage2_channels, "stage2_channels");
    positive(stage3_channels, "stage3_channels");
    positive(loc_enc_channels, "loc_enc_channels");
    positive(loc_hidden, "loc_hidden");
    positive(num_queries, "num_queries");
    positive(seg_channels, "seg_channels");
    if (image_size % 8 != 0) throw std::invalid_argument("arch.image_size must be divisible by 8");
}

std::string to_string(const HeadKey& key) {
    return key.dataset + "/" + to_string(key.task) + (key.subtask.empty() ? "" : "/" + key.subtask);
}

std::vector<HeadInfo> layout_heads(const std::vector<SynthDatasetSpec>& specs, const std::vector<HeadInfo>& existing) {
    std::map<ComponentKind, int> next;
    std::set<HeadKey> taken;
    for (const auto& h : existing) {
        next[h.component.kind] = std::max(next[h.component.kind], h.component.index + 1);
        taken.insert(h.key);
    }
    std::vector<HeadInfo> out;
    for (const auto& spec : specs)
        for (TaskKind task : {TaskKind::Cls, TaskKind::Loc, TaskKind::Seg}) {
            if (!spec.has_task(task)) continue;
            for (const auto& sub : spec.subtasks_of(task)) {
                HeadKey key{spec.id, task, sub};
                if (taken.contains(key)) continue;
                HeadInfo h;
                h.key = key;
                const auto kind = family_of(task);
                h.component = {kind, next[kind]++};
                if (sub.empty()) {
                    h.num_classes = spec.num_classes();
                    for (std::size_t c = 0; c < spec.num_classes(); ++c) h.class_map.push_back(c);
                } else {
                    h.num_classes = 1;
                    h.class_map = {spec.class_index(sub)};
                }
                taken.insert(key);
                out.push_back(std::move(h));
            }
        }
    return out;
}

Binder Binder::student(Tape& tape, ParamStore& store) {
    Binder b;
    b.tape_ = &tape;
    b.student_ = &store;
    return b;
}

Binder Binder::detached(Tape& tape, const ParamStore& primary, const ParamStore* fallback) {
    Binder b;
    b.tape_ = &tape;
    b.primary_ = &primary;
    b.fallback_ = fallback;
    return b;
}

Var Binder::operator()(const std::string& name) {
    if (auto it = cache_.find(name); it != cache_.end()) return it->second;
    Var v;
    if (student_) {
        v = tape_->parameter(student_->at(name));
    } else if (primary_->contains(name)) {
        v = tape_->frozen(primary_->at(name));
    } else if (fallback_) {
        v = tape_->frozen(fallback_->at(name));
    } else {
        throw std::invalid_argument("no weights bound for parameter '" + name + "'");
    }
    cache_.emplace(name, v);
    return v;
}

void FoundationModel::init(const std::string& name, Shape shape, ComponentId component, std::size_t fan_in, bool zero) {
    Tensor t(std::move(shape), 0.0);
    if (!zero) {
        std::mt19937_64 rng(derive_seed(arch_.seed, name));
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : t.data()) v = dist(rng);
    }
    params_.add(name, std::move(t), component);
}

void FoundationModel::add_shared() {
    const auto& a = arch_;
    const auto bb = ComponentId::backbone();
    init("backbone.conv1.weight", {a.stage1_channels, a.in_channels, 3, 3}, bb, a.in_channels * 9);
    init("backbone.conv1.bias", {a.stage1_channels}, bb, 1, true);
    init("backbone.conv2.weight", {a.stage2_channels, a.stage1_channels, 3, 3}, bb, a.stage1_channels * 9);
    init("backbone.conv2.bias", {a.stage2_channels}, bb, 1, true);
    init("backbone.conv3.weight", {a.stage3_channels, a.stage2_channels, 3, 3}, bb, a.stage2_channels * 9);
    init("backbone.conv3.bias", {a.stage3_channels}, bb, 1, true);

    const auto le = ComponentId::loc_encoder();
    init("loc_encoder.conv.weight", {a.loc_enc_channels, a.stage3_channels, 3, 3}, le, a.stage3_channels * 9);
    init("loc_encoder.conv.bias", {a.loc_enc_channels}, le, 1, true);

    const auto sd = ComponentId::seg_decoder();
    init("seg_decoder.lateral3.weight", {a.seg_channels, a.stage3_channels, 1, 1}, sd, a.stage3_channels);
    init("seg_decoder.lateral3.bias", {a.seg_channels}, sd, 1, true);
    init("seg_decoder.lateral2.weight", {a.seg_channels, a.stage2_channels, 1, 1}, sd, a.stage2_channels);
    init("seg_decoder.lateral2.bias", {a.seg_channels}, sd, 1, true);
    init("seg_decoder.lateral1.weight", {a.seg_channels, a.stage1_channels, 1, 1}, sd, a.stage1_channels);
    init("seg_decoder.lateral1.bias", {a.seg_channels}, sd, 1, true);
    init("seg_decoder.smooth2.weight", {a.seg_channels, a.seg_channels, 3, 3}, sd, a.seg_channels * 9);
    init("seg_decoder.smooth2.bias", {a.seg_channels}, sd, 1, true);
    init("seg_decoder.smooth1.weight", {a.seg_channels, a.seg_channels, 3, 3}, sd, a.seg_channels * 9);
    init("seg_decoder.smooth1.bias", {a.seg_channels}, sd, 1, true);
}

void FoundationModel::add_head_params(const HeadInfo& head) {
    const auto& a = arch_;
    const auto p = family_prefix(head.component);
    const auto c = head.component;
    switch (head.key.task) {
        case TaskKind::Cls:
            init(p + ".weight", {a.stage3_channels, head.num_classes}, c, a.stage3_channels);
            init(p + ".bias", {head.num_classes}, c, 1, true);
            break;
        case TaskKind::Loc: {
            const std::size_t side = a.image_size / 4, cells = side * side;
            const std::size_t d = a.loc_hidden, q = a.num_queries;
            // Anchors spread over the image in near-square rows; each query starts by
            // pooling the encoder cells around its anchor.
            const auto centers = anchor_centers(q);
            const double sigma = 0.5 / std::round(std::sqrt(static_cast<double>(q)));
            Tensor mix({cells, q}, 0.0), anchor({q, 4}, 0.0);
            for (std::size_t k = 0; k < q; ++k) {
                const auto [ax, ay] = centers[k];
                double z = 0.0;
                for (std::size_t cell = 0; cell < cells; ++cell) {
                    const double dx = (static_cast<double>(cell % side) + 0.5) / side - ax;
                    const double dy = (static_cast<double>(cell / side) + 0.5) / side - ay;
                    const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                    mix[cell * q + k] = w;
                    z += w;
                }
                for (std::size_t cell = 0; cell < cells; ++cell) mix[cell * q + k] /= z;
                for (std::size_t j = 0; j < 4; ++j) anchor[k * 4 + j] = logit(j == 0 ? ax : j == 1 ? ay : 0.25);
            }
            params_.add(p + ".mix.weight", std::move(mix), c);
            init(p + ".mix.bias", {q}, c, 1, true);
            params_.add(p + ".anchor", std::move(anchor), c);
            init(p + ".embed.weight", {a.loc_enc_channels, d}, c, a.loc_enc_channels);
            init(p + ".embed.bias", {d}, c, 1, true);
            init(p + ".query", {a.num_queries, d}, c, 6);
            init(p + ".hidden.weight", {d, d}, c, d);
            init(p + ".hidden.bias", {d}, c, 1, true);
            init(p + ".box.weight", {d, 4}, c, d);
            init(p + ".box.bias", {4}, c, 1, true);
            init(p + ".cls.weight", {d, head.num_classes + 1}, c, d);
            init(p + ".cls.bias", {head.num_classes + 1}, c, 1, true);
            break;
        }
        case TaskKind::Seg:
            init(p + ".weight", {head.num_classes, a.seg_channels, 1, 1}, c, a.seg_channels);
            init(p + ".bias", {head.num_classes}, c, 1, true);
            break;
    }
}

FoundationModel FoundationModel::build(const ArchConfig& arch, const std::vector<SynthDatasetSpec>& specs) {
    arch.validate();
    if (specs.empty()) throw std::invalid_argument("build_model: at least one dataset is required");
    std::set<std::string> ids;
    for (const auto& s : specs) {
        if (s.tasks.empty()) throw std::invalid_argument("build_model: dataset '" + s.id + "' has no tasks");
        s.validate();
        if (!ids.insert(s.id).second) throw std::invalid_argument("build_model: duplicate dataset id '" + s.id + "'");
        if (s.image_size != arch.image_size)
            throw std::invalid_argument("build_model: dataset '" + s.id + "' has image_size " + std::to_string(s.image_size) +
                                        " but the model expects " + std::to_string(arch.image_size));
    }
    return from_layout(arch, layout_heads(specs));
}

FoundationModel FoundationModel::from_layout(const ArchConfig& arch, std::vector<HeadInfo> heads) {
    arch.validate();
    FoundationModel m;
    m.arch_ = arch;
    m.add_shared();
    for (const auto& h : heads) m.add_head_params(h);
    m.heads_ = std::move(heads);
    return m;
}

bool FoundationModel::has_head(const HeadKey& key) const {
    return std::any_of(heads_.begin(), heads_.end(), [&](const HeadInfo& h) { return h.key == key; });
}

const HeadInfo& FoundationModel::head(const HeadKey& key) const {
    for (const auto& h : heads_)
        if (h.key == key) return h;
    throw std::invalid_argument("no " + to_string(key.task) + " head for dataset '" + key.dataset + "'" +
                                (key.subtask.empty() ? "" : " subtask '" + key.subtask + "'"));
}

std::vector<HeadInfo> FoundationModel::add_heads(const SynthDatasetSpec& spec) {
    spec.validate();
    if (spec.image_size != arch_.image_size)
        throw std::invalid_argument("dataset '" + spec.id + "' image_size does not match the model");
    auto fresh = layout_heads({spec}, heads_);
    for (const auto& h : fresh) {
        add_head_params(h);
        heads_.push_back(h);
    }
    return fresh;
}

std::vector<ComponentId> FoundationModel::components() const {
    std::vector<ComponentId> out{ComponentId::backbone(), ComponentId::loc_encoder(), ComponentId::seg_decoder()};
    for (const auto& h : heads_) out.push_back(h.component);
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<std::string> FoundationModel::parameter_names(const ComponentId& id) const {
    std::vector<std::string> out;
    for (const auto& p : params_.all())
        if (p.component == id) out.push_back(p.name);
    return out;
}

BackboneOut run_backbone(const FoundationModel& model, Binder& bind, Var images) {
    auto scope = bind.tape().scope("backbone");
    const auto& s = images.shape();
    if (s.size() != 4 || s[1] != model.arch().in_channels || s[2] != model.arch().image_size ||
        s[3] != model.arch().image_size)
        throw ShapeError("backbone: expected images [B," + std::to_string(model.arch().in_channels) + "," +
                         std::to_string(model.arch().image_size) + "," + std::to_string(model.arch().image_size) +
                         "], got " + shape_to_string(s));
    BackboneOut out;
    out.stage1 = relu(conv(bind, images, "backbone.conv1", 1));
    out.stage2 = relu(conv(bind, max_pool2d(out.stage1, 2), "backbone.conv2", 1));
    out.stage3 = relu(conv(bind, max_pool2d(out.stage2, 2), "backbone.conv3", 1));
    out.emb = max_pool2d(out.stage3, 2);
    return out;
}

Var run_loc_encoder(const FoundationModel&, Binder& bind, const BackboneOut& bb) {
    auto scope = bind.tape().scope("loc_encoder");
    return relu(conv(bind, bb.stage3, "loc_encoder.conv", 1));
}

Var run_seg_decoder(const FoundationModel&, Binder& bind, const BackboneOut& bb) {
    auto scope = bind.tape().scope("seg_decoder");
    Var top = conv(bind, bb.stage3, "seg_decoder.lateral3", 0);
    Var mid = relu(conv(bind, add(upsample_nearest(top, 2), conv(bind, bb.stage2, "seg_decoder.lateral2", 0)),
                        "seg_decoder.smooth2", 1));
    return relu(conv(bind, add(upsample_nearest(mid, 2), conv(bind, bb.stage1, "seg_decoder.lateral1", 0)),
                     "seg_decoder.smooth1", 1));
}

ClsOutput forward_cls(const FoundationModel& model, Binder& bind, Var images, const std::string& dataset,
                      const std::string& subtask) {
    const auto& h = model.head(dataset, TaskKind::Cls, subtask);
    ClsOutput out;
    const auto bb = run_backbone(model, bind, images);
    out.features.backbone_emb = bb.emb;
    auto scope = bind.tape().scope(family_prefix(h.component));
    out.logits = linear(bind, mean(bb.emb, {2, 3}), family_prefix(h.component));
    return out;
}

LocOutput forward_loc(const FoundationModel& model, Binder& bind, Var images, const std::string& dataset,
                      const std::string& subtask) {
    const auto& h = model.head(dataset, TaskKind::Loc, subtask);
    const auto& a = model.arch();
    LocOutput out;
    const auto bb = run_backbone(model, bind, images);
    out.features.backbone_emb = bb.emb;
    Var enc = run_loc_encoder(model, bind, bb);
    out.features.loc_enc_emb = enc;

    const auto p = family_prefix(h.component);
    auto scope = bind.tape().scope(p);
    const std::size_t b = images.shape()[0], q = a.num_queries, d = a.loc_hidden;
    const std::size_t ch = enc.shape()[1], cells = enc.value().numel() / (b * ch);
    // token mixing over spatial cells, one output per query
    Var mixed = linear(bind, reshape(enc, {b * ch, cells}), p + ".mix");
    Var tokens = reshape(transpose(reshape(mixed, {b, ch, q})), {b * q, ch});
    Var embedded = reshape(linear(bind, tokens, p + ".embed"), {b, q, d});
    Var per_query = relu(add(embedded, bind(p + ".query")));
    Var hidden = relu(linear(bind, reshape(per_query, {b * q, d}), p + ".hidden"));
    out.boxes = sigmoid(add(reshape(linear(bind, hidden, p + ".box"), {b, q, 4}), bind(p + ".anchor")));
    out.logits = reshape(linear(bind, hidden, p + ".cls"), {b, q, h.num_classes + 1});
    return out;
}

SegOutput forward_seg(const FoundationModel& model, Binder& bind, Var images, const std::string& dataset,
                      const std::string& subtask) {
    const auto& h = model.head(dataset, TaskKind::Seg, subtask);
    SegOutput out;
    const auto bb = run_backbone(model, bind, images);
    out.features.backbone_emb = bb.emb;
    Var dec = run_seg_decoder(model, bind, bb);
    out.features.seg_dec_emb = dec;
    auto scope = bind.tape().scope(family_prefix(h.component));
    out.logits = conv(bind, dec, family_prefix(h.component), 0);
    return out;
}

std::set<ComponentId> trainable_components(TaskKind task, EpochMode mode, const ComponentId& head) {
    if (mode == EpochMode::EvalOnly) return {};
    if (head.kind != family_of(task))
        throw std::invalid_argument("component " + to_string(head) + " is not a " + to_string(task) + " head");
    if (mode == EpochMode::Lock) return {head};
    switch (task) {
        case TaskKind::Cls: return {ComponentId::backbone(), head};
        case TaskKind::Loc: return {ComponentId::backbone(), ComponentId::loc_encoder(), head};
        case TaskKind::Seg: return {ComponentId::backbone(), ComponentId::seg_decoder(), head};
    }
    return {};
}

void set_trainable(ParamStore& params, const std::set<ComponentId>& trainable) {
    for (auto& p : params.all()) p.trainable = trainable.contains(p.component);
}

std::set<ComponentId> apply_freeze_mask(FoundationModel& model, TaskKind task, EpochMode mode, const ComponentId& head) {
    auto set = trainable_components(task, mode, head);
    set_trainable(model.params(), set);
    return set;
}

ParamCensus count_params(const ParamStore& params) {
    ParamCensus c;
    for (const auto& p : params.all()) {
        c.per_component[p.component] += p.value.numel();
        c.total += p.value.numel();
    }
    return c;
}

}  // namespace fx
