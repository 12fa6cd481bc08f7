#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "fx/model.hpp"

using namespace fx;

namespace {

SynthDatasetSpec spec(std::string id, std::vector<TaskKind> tasks, std::uint64_t seed = 1) {
    SynthDatasetSpec s;
    s.id = std::move(id);
    s.tasks = std::move(tasks);
    s.num_images = 8;
    s.seed = seed;
    return s;
}

std::size_t count_kind(const FoundationModel& m, ComponentKind k) {
    std::size_t n = 0;
    for (const auto& c : m.components()) n += c.kind == k && !c.shared();
    return n;
}

Tensor images(std::size_t b, std::uint64_t seed = 5) {
    Tensor t({b, 1, 32, 32});
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : t.data()) v = u(rng);
    return t;
}

void zero_component(FoundationModel& m, const ComponentId& id, double bias = 0.0) {
    for (auto& p : m.params().all()) {
        if (p.component != id) continue;
        const bool is_bias = p.name.ends_with(".bias");
        p.value.fill(is_bias ? bias : 0.0);
    }
}

// Components whose parameters received any non-zero gradient.
std::set<ComponentId> touched(const ParamStore& s) {
    std::set<ComponentId> out;
    for (const auto& p : s.all())
        for (double g : p.grad.data())
            if (g != 0.0) {
                out.insert(p.component);
                break;
            }
    return out;
}

std::vector<SynthDatasetSpec> two_full() {
    using enum TaskKind;
    return {spec("a", {Cls, Loc, Seg}, 1), spec("b", {Cls, Loc, Seg}, 2)};
}

}  // namespace

TEST(Build, MixedDatasetHeadCensus) {
    using enum TaskKind;
    std::vector<SynthDatasetSpec> specs;
    for (int i = 0; i < 11; ++i) {
        std::vector<TaskKind> tasks{Cls};
        if (i < 6) tasks.push_back(Loc);
        if (i >= 8) tasks.push_back(Seg);
        specs.push_back(spec("d" + std::to_string(i), tasks, i + 1));
    }
    auto m = FoundationModel::build(ArchConfig{}, specs);
    EXPECT_EQ(count_kind(m, ComponentKind::ClsHead), 11u);
    EXPECT_EQ(count_kind(m, ComponentKind::LocDecoder), 6u);
    EXPECT_EQ(count_kind(m, ComponentKind::SegHead), 3u);
}

TEST(Build, SingleFullDatasetHasOneOfEachPlusShared) {
    using enum TaskKind;
    auto m = FoundationModel::build(ArchConfig{}, {spec("x", {Cls, Loc, Seg})});
    const std::vector<ComponentId> expected{ComponentId::backbone(), ComponentId::cls_head(0), ComponentId::loc_encoder(),
                                            ComponentId::loc_decoder(0), ComponentId::seg_decoder(), ComponentId::seg_head(0)};
    auto got = m.components();
    EXPECT_EQ(std::set<ComponentId>(got.begin(), got.end()), std::set<ComponentId>(expected.begin(), expected.end()));
}

TEST(Build, ClsOnlyDatasetsKeepSharedBranchesButNoDecoders) {
    using enum TaskKind;
    auto m = FoundationModel::build(ArchConfig{}, {spec("a", {Cls}, 1), spec("b", {Cls}, 2)});
    const auto comps = m.components();
    std::set<ComponentId> set(comps.begin(), comps.end());
    EXPECT_TRUE(set.contains(ComponentId::loc_encoder()));
    EXPECT_TRUE(set.contains(ComponentId::seg_decoder()));
    EXPECT_EQ(count_kind(m, ComponentKind::LocDecoder), 0u);
    EXPECT_EQ(count_kind(m, ComponentKind::SegHead), 0u);
    EXPECT_EQ(count_kind(m, ComponentKind::ClsHead), 2u);
}

TEST(Build, RejectsBadInput) {
    EXPECT_THROW(FoundationModel::build(ArchConfig{}, {}), std::invalid_argument);
    EXPECT_THROW(FoundationModel::build(ArchConfig{}, {spec("a", {})}), std::invalid_argument);
    EXPECT_THROW(FoundationModel::build(ArchConfig{}, {spec("a", {TaskKind::Cls}), spec("a", {TaskKind::Loc})}),
                 std::invalid_argument);
    ArchConfig bad;
    bad.image_size = 30;
    EXPECT_THROW(FoundationModel::build(bad, {spec("a", {TaskKind::Cls})}), std::invalid_argument);
}

TEST(Forward, ClsShape) {
    auto m = FoundationModel::build(ArchConfig{}, {spec("a", {TaskKind::Cls})});
    Tape t;
    auto bind = Binder::student(t, m.params());
    auto out = forward_cls(m, bind, t.constant(images(4)), "a");
    EXPECT_EQ(out.logits.shape(), (Shape{4, 3}));
    EXPECT_TRUE(out.features.backbone_emb.valid());
    EXPECT_FALSE(out.features.loc_enc_emb);
    EXPECT_FALSE(out.features.seg_dec_emb);
}

TEST(Forward, LocShape) {
    auto m = FoundationModel::build(ArchConfig{}, {spec("a", {TaskKind::Loc})});
    Tape t;
    auto bind = Binder::student(t, m.params());
    auto out = forward_loc(m, bind, t.constant(images(2)), "a");
    EXPECT_EQ(out.boxes.shape(), (Shape{2, 10, 4}));
    EXPECT_EQ(out.logits.shape(), (Shape{2, 10, 4}));
    for (double v : out.boxes.value().data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LT(v, 1.0);
    }
    EXPECT_TRUE(out.features.loc_enc_emb);
    EXPECT_FALSE(out.features.seg_dec_emb);
}

TEST(Forward, SegShapeMatchesInput) {
    auto s = spec("a", {TaskKind::Seg});
    s.shape_classes = {"ring"};
    auto m = FoundationModel::build(ArchConfig{}, {s});
    Tape t;
    auto bind = Binder::student(t, m.params());
    auto out = forward_seg(m, bind, t.constant(images(3)), "a");
    EXPECT_EQ(out.logits.shape(), (Shape{3, 1, 32, 32}));
    EXPECT_TRUE(out.features.seg_dec_emb);
    EXPECT_FALSE(out.features.loc_enc_emb);
}

TEST(Forward, UnknownDatasetRejected) {
    auto m = FoundationModel::build(ArchConfig{}, {spec("a", {TaskKind::Cls})});
    Tape t;
    auto bind = Binder::student(t, m.params());
    EXPECT_THROW(forward_cls(m, bind, t.constant(images(1)), "zzz"), std::invalid_argument);
    EXPECT_THROW(forward_loc(m, bind, t.constant(images(1)), "a"), std::invalid_argument);
}

TEST(Forward, WrongImageShapeRejected) {
    auto m = FoundationModel::build(ArchConfig{}, {spec("a", {TaskKind::Cls})});
    Tape t;
    auto bind = Binder::student(t, m.params());
    EXPECT_THROW(forward_cls(m, bind, t.constant(Tensor({1, 1, 16, 16})), "a"), ShapeError);
}

TEST(Forward, ZeroedClsHeadGivesConstantBias) {
    auto m = FoundationModel::build(ArchConfig{}, {spec("a", {TaskKind::Cls})});
    zero_component(m, ComponentId::cls_head(0), 0.375);
    Tape t;
    auto bind = Binder::student(t, m.params());
    for (double v : forward_cls(m, bind, t.constant(images(4)), "a").logits.value().data()) EXPECT_EQ(v, 0.375);
}

TEST(Forward, ZeroedLocDecoderGivesCentredHalfBoxes) {
    auto m = FoundationModel::build(ArchConfig{}, {spec("a", {TaskKind::Loc})});
    zero_component(m, ComponentId::loc_decoder(0));
    Tape t;
    auto bind = Binder::student(t, m.params());
    for (double v : forward_loc(m, bind, t.constant(images(2)), "a").boxes.value().data()) EXPECT_EQ(v, 0.5);
}

TEST(Forward, ZeroedSegHeadGivesBias) {
    auto m = FoundationModel::build(ArchConfig{}, {spec("a", {TaskKind::Seg})});
    zero_component(m, ComponentId::seg_head(0), -1.25);
    Tape t;
    auto bind = Binder::student(t, m.params());
    for (double v : forward_seg(m, bind, t.constant(images(2)), "a").logits.value().data()) EXPECT_EQ(v, -1.25);
}

TEST(Forward, DeterministicForSameSeed) {
    auto m1 = FoundationModel::build(ArchConfig{}, two_full());
    auto m2 = FoundationModel::build(ArchConfig{}, two_full());
    Tape t1, t2;
    auto b1 = Binder::student(t1, m1.params());
    auto b2 = Binder::student(t2, m2.params());
    auto o1 = forward_loc(m1, b1, t1.constant(images(2)), "b");
    auto o2 = forward_loc(m2, b2, t2.constant(images(2)), "b");
    EXPECT_TRUE(bit_equal(o1.boxes.value(), o2.boxes.value()));
    EXPECT_TRUE(bit_equal(o1.logits.value(), o2.logits.value()));

    ArchConfig other;
    other.seed = 9;
    auto m3 = FoundationModel::build(other, two_full());
    EXPECT_FALSE(bit_equal(m1.params().at("backbone.conv1.weight").value, m3.params().at("backbone.conv1.weight").value));
}

TEST(Routing, ClsLossTouchesOnlyBackboneAndOwnHead) {
    auto m = FoundationModel::build(ArchConfig{}, two_full());
    Tape t;
    auto bind = Binder::student(t, m.params());
    t.backward(sum(forward_cls(m, bind, t.constant(images(2)), "b").logits));
    EXPECT_EQ(touched(m.params()), (std::set<ComponentId>{ComponentId::backbone(), ComponentId::cls_head(1)}));
}

TEST(Routing, LocLossTouchesOnlyLocPath) {
    auto m = FoundationModel::build(ArchConfig{}, two_full());
    Tape t;
    auto bind = Binder::student(t, m.params());
    auto out = forward_loc(m, bind, t.constant(images(2)), "a");
    t.backward(add(sum(out.boxes), sum(out.logits)));
    EXPECT_EQ(touched(m.params()),
              (std::set<ComponentId>{ComponentId::backbone(), ComponentId::loc_encoder(), ComponentId::loc_decoder(0)}));
}

TEST(Routing, SegLossTouchesOnlySegPath) {
    auto m = FoundationModel::build(ArchConfig{}, two_full());
    Tape t;
    auto bind = Binder::student(t, m.params());
    t.backward(sum(forward_seg(m, bind, t.constant(images(2)), "b").logits));
    EXPECT_EQ(touched(m.params()),
              (std::set<ComponentId>{ComponentId::backbone(), ComponentId::seg_decoder(), ComponentId::seg_head(1)}));
}

TEST(FreezeMask, OrgansSubtaskPattern) {
    using enum TaskKind;
    const auto bb = ComponentId::backbone(), le = ComponentId::loc_encoder(), sd = ComponentId::seg_decoder();
    auto s = spec("organs", {Loc, Seg});
    s.class_names = {"heart", "left_lung", "right_lung"};
    s.subtasks[Loc] = s.class_names;
    s.subtasks[Seg] = s.class_names;
    auto m = FoundationModel::build(ArchConfig{}, {s});

    // Rows 1-12: loc heart/left/right then seg heart/left/right, each Lock then Release.
    std::vector<std::set<ComponentId>> rows;
    int row = 0;
    for (TaskKind task : {Loc, Seg})
        for (const auto& organ : s.class_names) {
            const auto head = m.head("organs", task, organ).component;
            for (EpochMode mode : {EpochMode::Lock, EpochMode::Release}) {
                ++row;
                const auto trainable = apply_freeze_mask(m, task, mode, head);
                const auto branch = task == Loc ? le : sd;
                if (mode == EpochMode::Lock)
                    EXPECT_EQ(trainable, (std::set<ComponentId>{head})) << "row " << row;
                else
                    EXPECT_EQ(trainable, (std::set<ComponentId>{bb, branch, head})) << "row " << row;
                for (const auto& p : m.params().all()) EXPECT_EQ(p.trainable, trainable.contains(p.component)) << p.name;
            }
        }
    EXPECT_EQ(row, 12);
    // Row 1 and row 8 spelled out.
    const auto heart_loc = m.head("organs", Loc, "heart").component;
    EXPECT_EQ(trainable_components(Loc, EpochMode::Lock, heart_loc), (std::set<ComponentId>{heart_loc}));
    const auto heart_seg = m.head("organs", Seg, "heart").component;
    EXPECT_EQ(trainable_components(Seg, EpochMode::Release, heart_seg), (std::set<ComponentId>{bb, sd, heart_seg}));
}

TEST(FreezeMask, ClsReleaseAndEvalOnly) {
    const auto head = ComponentId::cls_head(2);
    EXPECT_EQ(trainable_components(TaskKind::Cls, EpochMode::Release, head),
              (std::set<ComponentId>{ComponentId::backbone(), head}));
    EXPECT_TRUE(trainable_components(TaskKind::Seg, EpochMode::EvalOnly, ComponentId::seg_head(0)).empty());
}

TEST(Census, LinearHeadInFourOutThree) {
    ArchConfig a;
    a.stage3_channels = 4;
    auto m = FoundationModel::build(a, {spec("a", {TaskKind::Cls})});
    EXPECT_EQ(count_params(m.params()).per_component.at(ComponentId::cls_head(0)), 15u);
}

TEST(Census, PartitionAndEqualDecoders) {
    auto m = FoundationModel::build(ArchConfig{}, two_full());
    const auto census = count_params(m.params());
    const std::size_t sum = std::accumulate(census.per_component.begin(), census.per_component.end(), std::size_t{0},
                                            [](std::size_t acc, const auto& kv) { return acc + kv.second; });
    EXPECT_EQ(sum, census.total);
    EXPECT_EQ(census.total, m.params().total_elements());
    EXPECT_EQ(census.per_component.at(ComponentId::loc_decoder(0)), census.per_component.at(ComponentId::loc_decoder(1)));
    EXPECT_EQ(census.per_component.at(ComponentId::seg_head(0)), census.per_component.at(ComponentId::seg_head(1)));
}

TEST(Layout, FamilyIndicesFollowDatasetOrder) {
    using enum TaskKind;
    auto heads = layout_heads({spec("a", {Cls, Seg}), spec("b", {Cls, Loc}), spec("c", {Loc, Seg})});
    std::map<std::string, ComponentId> by_name;
    for (const auto& h : heads) by_name[to_string(h.key)] = h.component;
    ASSERT_EQ(heads.size(), 6u);
    EXPECT_EQ(heads[0].component, ComponentId::cls_head(0));
    EXPECT_EQ(heads[1].component, ComponentId::seg_head(0));
    EXPECT_EQ(heads[2].component, ComponentId::cls_head(1));
    EXPECT_EQ(heads[3].component, ComponentId::loc_decoder(0));
    EXPECT_EQ(heads[4].component, ComponentId::loc_decoder(1));
    EXPECT_EQ(heads[5].component, ComponentId::seg_head(1));
}

TEST(Layout, AddHeadsAppendsFreshIndices) {
    auto m = FoundationModel::build(ArchConfig{}, two_full());
    const auto before = m.params().at("backbone.conv1.weight").value;
    auto added = m.add_heads(spec("new", {TaskKind::Loc}, 7));
    ASSERT_EQ(added.size(), 1u);
    EXPECT_EQ(added[0].component, ComponentId::loc_decoder(2));
    EXPECT_TRUE(m.has_head({"new", TaskKind::Loc, ""}));
    EXPECT_TRUE(bit_equal(before, m.params().at("backbone.conv1.weight").value));
    EXPECT_TRUE(m.add_heads(spec("new", {TaskKind::Loc}, 7)).empty());
}
