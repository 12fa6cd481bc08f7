#include "fx/engine.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "fx/hash.hpp"

namespace fx {
namespace {

bool mirrored(const ComponentId& id, bool mirror_heads) { return id.shared() || mirror_heads; }

Tensor stack_images(const std::vector<SynthSample>& samples) {
    const auto& s = samples.front().image.shape();
    Tensor out({samples.size(), s[0], s[1], s[2]});
    const std::size_t n = samples.front().image.numel();
    for (std::size_t i = 0; i < samples.size(); ++i)
        std::copy(samples[i].image.data().begin(), samples[i].image.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * n));
    return out;
}

Tensor label_targets(const std::vector<SynthSample>& samples, const HeadInfo& head) {
    Tensor out({samples.size(), head.num_classes});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].labels) throw std::invalid_argument("sample has no classification labels");
        for (std::size_t k = 0; k < head.num_classes; ++k) out[i * head.num_classes + k] = (*samples[i].labels)[head.class_map[k]];
    }
    return out;
}

BoxTarget box_target(const SynthSample& sample, const HeadInfo& head) {
    if (!sample.boxes) throw std::invalid_argument("sample has no box annotations");
    BoxTarget t;
    for (std::size_t j = 0; j < sample.boxes->size(); ++j) {
        auto it = std::find(head.class_map.begin(), head.class_map.end(), sample.boxes->class_ids[j]);
        if (it == head.class_map.end()) continue;
        t.boxes.push_back(sample.boxes->boxes[j]);
        t.class_ids.push_back(static_cast<std::size_t>(it - head.class_map.begin()));
    }
    return t;
}

Tensor mask_targets(const std::vector<SynthSample>& samples, const HeadInfo& head) {
    const auto& ms = samples.front().mask;
    if (!ms) throw std::invalid_argument("sample has no segmentation mask");
    const std::size_t hw = ms->dim(1) * ms->dim(2);
    Tensor out({samples.size(), head.num_classes, ms->dim(1), ms->dim(2)});
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].mask) throw std::invalid_argument("sample has no segmentation mask");
        for (std::size_t k = 0; k < head.num_classes; ++k) {
            auto src = samples[i].mask->data().subspan(head.class_map[k] * hw, hw);
            std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>((i * head.num_classes + k) * hw));
        }
    }
    return out;
}

std::string epoch_tag(std::size_t epoch) { return "epoch/" + std::to_string(epoch); }

}  // namespace

std::string to_string(DataFraction f) { return f == DataFraction::Half ? "half" : "full"; }

std::string EpochPlanEntry::task_label() const { return to_string(task) + (subtask ? "/" + *subtask : ""); }

bool TrainConfig::lock_release_on(TaskKind t) const {
    auto it = lock_release.find(t);
    return it != lock_release.end() && it->second;
}

void TrainConfig::validate() const {
    for (auto [v, field] : {std::pair{lr_backbone, "lr_backbone"}, {lr_loc, "lr_loc"}, {lr_seg, "lr_seg"}, {lr_cls_head, "lr_cls_head"}})
        if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string("train.") + field + " must be positive");
    if (!(momentum >= 0.0 && momentum <= 1.0)) throw std::invalid_argument("train.momentum must lie in [0,1]");
    if (!(step_decay_factor > 0.0)) throw std::invalid_argument("train.step_decay_factor must be positive");
    if (epochs_per_task == 0) throw std::invalid_argument("train.epochs_per_task must be positive");
    if (batch_size == 0) throw std::invalid_argument("train.batch_size must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("train.weight_decay must be non-negative");
    if (!(consistency_weight >= 0.0)) throw std::invalid_argument("train.consistency_weight must be non-negative");
    if (loc_weights.cls < 0 || loc_weights.l1 < 0 || loc_weights.iou < 0 || loc_weights.no_object <= 0)
        throw std::invalid_argument("train.loc_weights must be non-negative with a positive no_object weight");
}

CyclePlan build_cycle_plan(const std::vector<SynthDatasetSpec>& specs, const TrainConfig& config, std::size_t cycle_index) {
    if (specs.empty()) throw std::invalid_argument("build_cycle_plan: no datasets");
    const auto heads = layout_heads(specs);
    CyclePlan plan;
    plan.cycle_index = cycle_index;
    for (const auto& h : heads) {
        EpochPlanEntry e;
        e.dataset = h.key.dataset;
        e.task = h.key.task;
        if (!h.key.subtask.empty()) e.subtask = h.key.subtask;
        e.head = h.component;
        if (config.lock_release_on(e.task)) {
            e.mode = EpochMode::Lock;
            e.fraction = DataFraction::Half;
            e.trainable_components = trainable_components(e.task, e.mode, e.head);
            plan.entries.push_back(e);
        }
        e.mode = EpochMode::Release;
        e.fraction = DataFraction::Full;
        e.trainable_components = trainable_components(e.task, e.mode, e.head);
        plan.entries.push_back(std::move(e));
    }
    return plan;
}

std::vector<std::size_t> sample_lock_subset(std::size_t n, std::uint64_t epoch_seed) {
    if (n == 0) throw std::invalid_argument("sample_lock_subset: empty dataset");
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(epoch_seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize((n + 1) / 2);
    std::sort(idx.begin(), idx.end());
    return idx;
}

TeacherState init_teacher(const FoundationModel& student, double momentum, bool mirror_heads) {
    TeacherState t;
    t.momentum = momentum;
    for (const auto& p : student.params().all())
        if (mirrored(p.component, mirror_heads)) t.params.add_detached(p.name, p.value, p.component);
    return t;
}

void ema_update(TeacherState& teacher, const ParamStore& student, double lambda) {
    for (auto& t : teacher.params.all()) {
        if (!student.contains(t.name)) throw std::invalid_argument("ema_update: student has no parameter '" + t.name + "'");
        const auto& s = student.at(t.name);
        if (s.value.shape() != t.value.shape())
            throw std::invalid_argument("ema_update: shape mismatch for '" + t.name + "': teacher " + shape_to_string(t.value.shape()) +
                                        " vs student " + shape_to_string(s.value.shape()));
    }
    for (auto& t : teacher.params.all()) {
        const auto& s = student.at(t.name).value;
        for (std::size_t i = 0; i < t.value.numel(); ++i) t.value[i] = lambda * t.value[i] + (1.0 - lambda) * s[i];
    }
}

ParamStore teacher_weights(const FoundationModel& student, const TeacherState& teacher) {
    ParamStore out;
    for (const auto& p : student.params().all()) {
        const auto& value = teacher.params.contains(p.name) ? teacher.params.at(p.name).value : p.value;
        out.add_detached(p.name, value, p.component);
    }
    return out;
}

DatasetBundle make_bundle(const SynthDatasetSpec& spec, std::uint64_t split_seed) {
    DatasetBundle b;
    b.spec = spec;
    b.samples = generate_dataset(spec);
    b.split = split(b.samples.size(), derive_seed(split_seed, spec.id));
    return b;
}

double lr_multiplier(const TrainConfig& config, std::size_t global_epoch) {
    if (config.step_decay_interval == 0 || global_epoch == 0) return 1.0;
    return std::pow(config.step_decay_factor, static_cast<double>((global_epoch - 1) / config.step_decay_interval));
}

double component_lr(const TrainConfig& config, const ComponentId& id) {
    switch (id.kind) {
        case ComponentKind::Backbone: return config.lr_backbone;
        case ComponentKind::ClsHead: return config.lr_cls_head;
        case ComponentKind::LocEncoder:
        case ComponentKind::LocDecoder: return config.lr_loc;
        case ComponentKind::SegDecoder:
        case ComponentKind::SegHead: return config.lr_seg;
    }
    return 0.0;
}

EpochResult run_epoch(FoundationModel& model, const TeacherState* teacher, const EpochPlanEntry& entry,
                      const DatasetBundle& data, AdamW& optimizer, const TrainConfig& config, std::uint64_t epoch_seed,
                      std::size_t global_epoch) {
    if (data.split.train.empty()) throw std::invalid_argument("run_epoch: dataset '" + data.spec.id + "' has no training samples");
    if (data.spec.id != entry.dataset)
        throw std::invalid_argument("run_epoch: entry for '" + entry.dataset + "' given data of '" + data.spec.id + "'");
    const auto& head = model.head(entry.head_key());
    if (head.component != entry.head) throw std::invalid_argument("run_epoch: plan entry does not match the model's head layout");

    std::vector<std::size_t> pool = data.split.train;
    if (entry.fraction == DataFraction::Half) {
        std::vector<std::size_t> half;
        for (auto i : sample_lock_subset(pool.size(), epoch_seed)) half.push_back(pool[i]);
        pool = std::move(half);
    }
    std::mt19937_64 order_rng(derive_seed(epoch_seed, "order"));
    std::shuffle(pool.begin(), pool.end(), order_rng);

    set_trainable(model.params(), entry.trainable_components);
    const double mult = lr_multiplier(config, global_epoch);
    const auto lr_of = [&](const Parameter& p) { return component_lr(config, p.component) * mult; };

    EpochResult result;
    double task_sum = 0.0;
    std::vector<std::pair<std::string, double>> cons_sum;
    for (std::size_t start = 0; start < pool.size(); start += config.batch_size) {
        const std::size_t end = std::min(pool.size(), start + config.batch_size);
        std::vector<SynthSample> batch;
        for (std::size_t k = start; k < end; ++k)
            batch.push_back(augment(data.samples[pool[k]], derive_seed(epoch_seed, pool[k]), data.spec.noise_level));
        const Tensor images = stack_images(batch);

        model.params().zero_grad();
        Tape tape;
        auto bind = Binder::student(tape, model.params());
        Var x = tape.constant(images);
        Var task_loss;
        FeatureBundle feats;
        switch (entry.task) {
            case TaskKind::Cls: {
                auto out = forward_cls(model, bind, x, entry.dataset, head.key.subtask);
                task_loss = cls_loss(out.logits, label_targets(batch, head));
                feats = out.features;
                break;
            }
            case TaskKind::Loc: {
                auto out = forward_loc(model, bind, x, entry.dataset, head.key.subtask);
                std::vector<BoxTarget> targets;
                for (const auto& s : batch) targets.push_back(box_target(s, head));
                task_loss = loc_loss(out.boxes, out.logits, targets, config.loc_weights);
                feats = out.features;
                break;
            }
            case TaskKind::Seg: {
                auto out = forward_seg(model, bind, x, entry.dataset, head.key.subtask);
                task_loss = seg_loss(out.logits, mask_targets(batch, head));
                feats = out.features;
                break;
            }
        }

        Var total = task_loss;
        std::vector<std::pair<std::string, double>> terms;
        if (teacher) {
            Tape ttape;
            auto tbind = Binder::detached(ttape, teacher->params, &model.params());
            const auto tbb = run_backbone(model, tbind, ttape.constant(images));
            std::vector<std::pair<std::string, Var>> pairs{{"backbone", consistency_loss(feats.backbone_emb, tbb.emb.value())}};
            if (entry.task == TaskKind::Loc)
                pairs.emplace_back("loc_encoder", consistency_loss(*feats.loc_enc_emb, run_loc_encoder(model, tbind, tbb).value()));
            if (entry.task == TaskKind::Seg)
                pairs.emplace_back("seg_decoder", consistency_loss(*feats.seg_dec_emb, run_seg_decoder(model, tbind, tbb).value()));
            for (auto& [name, term] : pairs) {
                Var weighted = scale(term, config.consistency_weight);
                total = add(total, weighted);
                terms.emplace_back(name, weighted.value().item());
            }
        }
        tape.backward(total);
        optimizer.step(model.params(), lr_of);

        task_sum += task_loss.value().item();
        if (cons_sum.empty()) cons_sum = terms;
        else
            for (std::size_t i = 0; i < terms.size(); ++i) cons_sum[i].second += terms[i].second;
        ++result.steps;
        result.samples_used += batch.size();
    }
    const auto steps = static_cast<double>(result.steps);
    for (auto& t : cons_sum) t.second /= steps;
    result.mean_loss = make_breakdown(task_sum / steps, std::move(cons_sum));
    return result;
}

EvalPredictions predict(const FoundationModel& model, const ParamStore& weights, const DatasetBundle& data,
                        const HeadKey& key, const std::vector<std::size_t>& indices, std::size_t batch_size) {
    const auto& head = model.head(key);
    if (key.dataset != data.spec.id) throw std::invalid_argument("predict: head for '" + key.dataset + "' given data of '" + data.spec.id + "'");
    if (!data.spec.has_task(key.task))
        throw std::invalid_argument("predict: dataset '" + data.spec.id + "' has no " + to_string(key.task) + " annotations");
    EvalPredictions out;
    out.key = key;
    const std::size_t n = indices.size(), nc = head.num_classes, size = data.spec.image_size;
    if (n == 0) return out;
    if (key.task == TaskKind::Cls) out.scores = out.labels = Tensor({n, nc});
    if (key.task == TaskKind::Seg) out.pred_masks = out.gt_masks = Tensor({n, nc, size, size});

    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        std::vector<SynthSample> batch;
        for (std::size_t k = start; k < end; ++k) batch.push_back(data.samples[indices[k]]);
        Tape tape;
        auto bind = Binder::detached(tape, weights);
        Var x = tape.constant(stack_images(batch));
        switch (key.task) {
            case TaskKind::Cls: {
                const auto probs = sigmoid(forward_cls(model, bind, x, key.dataset, key.subtask).logits).value();
                const auto labels = label_targets(batch, head);
                std::copy(probs.data().begin(), probs.data().end(), out.scores.data().begin() + static_cast<std::ptrdiff_t>(start * nc));
                std::copy(labels.data().begin(), labels.data().end(), out.labels.data().begin() + static_cast<std::ptrdiff_t>(start * nc));
                break;
            }
            case TaskKind::Loc: {
                auto res = forward_loc(model, bind, x, key.dataset, key.subtask);
                const auto& boxes = res.boxes.value();
                const auto probs = softmax(res.logits).value();
                const std::size_t q = boxes.dim(1);
                for (std::size_t b = 0; b < batch.size(); ++b) {
                    const std::size_t image_id = start + b;
                    for (std::size_t j = 0; j < q; ++j) {
                        const double* p = &probs.data()[(b * q + j) * (nc + 1)];
                        const auto best = static_cast<std::size_t>(std::max_element(p, p + nc) - p);
                        const double* bx = &boxes.data()[(b * q + j) * 4];
                        out.detections.push_back({image_id, Box{bx[0], bx[1], bx[2], bx[3]}, best, p[best]});
                    }
                    const auto t = box_target(batch[b], head);
                    for (std::size_t g = 0; g < t.size(); ++g) out.ground_truths.push_back({image_id, t.boxes[g], t.class_ids[g]});
                }
                break;
            }
            case TaskKind::Seg: {
                const auto logits = forward_seg(model, bind, x, key.dataset, key.subtask).logits.value();
                const auto gt = mask_targets(batch, head);
                const auto offset = static_cast<std::ptrdiff_t>(start * nc * size * size);
                for (std::size_t i = 0; i < logits.numel(); ++i) out.pred_masks[static_cast<std::size_t>(offset) + i] = logits[i] >= 0.0 ? 1.0 : 0.0;
                std::copy(gt.data().begin(), gt.data().end(), out.gt_masks.data().begin() + offset);
                break;
            }
        }
    }
    return out;
}

std::optional<double> score(const EvalPredictions& p) {
    switch (p.key.task) {
        case TaskKind::Cls:
            if (p.scores.empty()) return std::nullopt;
            return auc(p.scores, p.labels);
        case TaskKind::Loc: return map_at_iou(p.detections, p.ground_truths, 0.40);
        case TaskKind::Seg: {
            if (p.pred_masks.empty()) return std::nullopt;
            const std::size_t n = p.pred_masks.dim(0), nc = p.pred_masks.dim(1);
            const std::size_t hw = p.pred_masks.dim(2) * p.pred_masks.dim(3);
            double total = 0.0;
            for (std::size_t c = 0; c < nc; ++c) {
                Tensor a({n * hw}), b({n * hw});
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t k = 0; k < hw; ++k) {
                        a[i * hw + k] = p.pred_masks[(i * nc + c) * hw + k];
                        b[i * hw + k] = p.gt_masks[(i * nc + c) * hw + k];
                    }
                total += dice(a, b);
            }
            return total / static_cast<double>(nc);
        }
    }
    return std::nullopt;
}

std::optional<double> evaluate(const FoundationModel& model, const ParamStore& weights, const DatasetBundle& data,
                               const HeadKey& key, const std::vector<std::size_t>& indices) {
    return score(predict(model, weights, data, key, indices));
}

PretrainResult run_pretraining(FoundationModel& model, const std::vector<DatasetBundle>& data, const TrainConfig& config,
                               const PretrainHooks& hooks) {
    std::vector<SynthDatasetSpec> specs;
    std::map<std::string, const DatasetBundle*> by_id;
    for (const auto& b : data) {
        specs.push_back(b.spec);
        by_id[b.spec.id] = &b;
    }
    for (const auto& h : model.heads())
        if (!by_id.contains(h.key.dataset)) throw std::invalid_argument("run_pretraining: no data for dataset '" + h.key.dataset + "'");

    PretrainResult res{init_teacher(model, config.momentum, config.mirror_heads),
                       AdamW(AdamWHyper{0.9, 0.999, 1e-8, config.weight_decay}), {}, {}};
    auto emit = [&](MetricsRecord r) {
        if (hooks.on_record) hooks.on_record(r);
        res.records.push_back(std::move(r));
    };
    auto eval_head = [&](std::size_t cycle, std::size_t epoch, const HeadInfo& h, EpochMode mode) {
        const auto& b = *by_id.at(h.key.dataset);
        const auto v = evaluate(model, model.params(), b, h.key, b.split.test);
        if (!v) return;
        emit({cycle, epoch, h.key.dataset, to_string(h.key.task) + (h.key.subtask.empty() ? "" : "/" + h.key.subtask), mode,
              metric_name(h.key.task), *v});
    };

    std::size_t epoch = 0;
    for (std::size_t cycle = 1; cycle <= config.num_cycles; ++cycle) {
        const auto plan = build_cycle_plan(specs, config, cycle - 1);
        for (const auto& entry : plan.entries)
            for (std::size_t rep = 0; rep < config.epochs_per_task; ++rep) {
                ++epoch;
                const EpochEvent ev{cycle, epoch, entry, model, res.teacher};
                if (hooks.before_epoch) hooks.before_epoch(ev);
                const auto seed = derive_seed(config.seed, epoch_tag(epoch));
                auto result = run_epoch(model, config.student_teacher ? &res.teacher : nullptr, entry, *by_id.at(entry.dataset),
                                        res.optimizer, config, seed, epoch);
                ema_update(res.teacher, model.params(), config.student_teacher ? config.momentum : 0.0);
                if (hooks.after_epoch) hooks.after_epoch(ev);
                EpochSummary summary{cycle, epoch, entry, std::move(result)};
                if (hooks.on_epoch) hooks.on_epoch(summary);
                res.epochs.push_back(std::move(summary));

                if (config.eval_all_every_epoch) {
                    for (const auto& h : model.heads())
                        eval_head(cycle, epoch, h, h.component == entry.head ? entry.mode : EpochMode::EvalOnly);
                } else if (config.eval_after_release && entry.mode == EpochMode::Release) {
                    eval_head(cycle, epoch, model.head(entry.head_key()), entry.mode);
                }
            }
        if (hooks.after_cycle) hooks.after_cycle(cycle, model, res.teacher, res.optimizer);
    }
    set_trainable(model.params(), {});
    return res;
}

std::string to_string(FinetuneMode mode) { return mode == FinetuneMode::Full ? "full" : "head-only"; }

FinetuneMode parse_finetune_mode(const std::string& text) {
    if (text == "full") return FinetuneMode::Full;
    if (text == "head-only" || text == "head_only") return FinetuneMode::HeadOnly;
    throw std::invalid_argument("invalid finetune mode '" + text + "' (expected full or head-only)");
}

FinetuneResult finetune(FoundationModel& model, const DatasetBundle& data, const FinetuneConfig& cfg, const TrainConfig& train) {
    if (cfg.epochs == 0) throw std::invalid_argument("finetune: epochs must be positive");
    const HeadKey key{data.spec.id, cfg.task, cfg.subtask};
    if (!data.spec.has_task(cfg.task))
        throw std::invalid_argument("finetune: dataset '" + data.spec.id + "' has no " + to_string(cfg.task) + " annotations");
    FinetuneResult res;
    if (!model.has_head(key)) {
        if (!cfg.init_new_head)
            throw std::invalid_argument("finetune: model has no " + to_string(cfg.task) + " head for dataset '" + data.spec.id +
                                        "'; pass --init-new-head to create one");
        model.add_heads(data.spec);
        res.added_head = true;
    }
    const auto head = model.head(key).component;
    const std::set<ComponentId> trainable =
        cfg.mode == FinetuneMode::HeadOnly ? std::set<ComponentId>{head} : trainable_components(cfg.task, EpochMode::Release, head);

    const auto census = count_params(model.params());
    res.total_params = census.total;
    for (const auto& c : trainable) res.trainable_params += census.per_component.at(c);
    res.trainable_ratio = static_cast<double>(res.trainable_params) / static_cast<double>(res.total_params);

    DatasetBundle local = data;
    if (cfg.few_shot_k) local.split.train = few_shot_subset(data.split.train, *cfg.few_shot_k, derive_seed(cfg.seed, "few-shot"));
    res.train_size = local.split.train.size();

    EpochPlanEntry entry;
    entry.dataset = key.dataset;
    entry.task = key.task;
    if (!key.subtask.empty()) entry.subtask = key.subtask;
    entry.mode = EpochMode::Release;
    entry.fraction = DataFraction::Full;
    entry.trainable_components = trainable;
    entry.head = head;
    const EpochMode logged_mode = cfg.mode == FinetuneMode::HeadOnly ? EpochMode::Lock : EpochMode::Release;

    auto frozen_sums = [&] {
        auto sums = component_checksums(model.params());
        for (const auto& c : trainable) sums.erase(c);
        return sums;
    };
    const auto before = frozen_sums();
    AdamW opt(AdamWHyper{0.9, 0.999, 1e-8, train.weight_decay});
    for (std::size_t e = 1; e <= cfg.epochs; ++e) {
        res.epochs.push_back(run_epoch(model, nullptr, entry, local, opt, train, derive_seed(cfg.seed, "finetune/" + std::to_string(e)), e));
        if (cfg.mode == FinetuneMode::HeadOnly && frozen_sums() != before)
            throw std::logic_error("finetune: a frozen component changed during head-only epoch " + std::to_string(e));
        if (auto v = evaluate(model, model.params(), local, key, local.split.test))
            res.records.push_back({0, e, key.dataset, entry.task_label(), logged_mode, metric_name(key.task), *v});
    }
    set_trainable(model.params(), {});
    return res;
}

}  // namespace fx
