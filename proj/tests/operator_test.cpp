/*
    Copyright 2026 The vsnstream Authors

    Licensed under the Apache License, Version 2.0 (the "License");
    you may not use this file except in compliance with the License.
    You may obtain a copy of the License at

        https://www.apache.org/licenses/LICENSE-2.0

    Unless required by applicable law or agreed to in writing, software
    distributed under the License is distributed on an "AS IS" BASIS,
    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
    See the License for the specific language governing permissions and
    limitations under the License.
*/

#include <vsn/operator.hpp>
#include <vsn/operators.hpp>

#include <gtest/gtest.h>

#include <random>
#include <set>
#include <tuple>

#include "oracles.hpp"

namespace vsn {
namespace {

constexpr EventTime kHour = 60 * kMinute;
constexpr EventTime kNine = 9 * kHour;

TuplePtr tweet(EventTime tau, std::string text) { return make_tuple(tau, {std::string("C"), std::move(text)}); }

using Cell = std::tuple<std::int64_t, EventTime, std::string>;

std::set<Cell> cells(SharedState<CountState>& sigma) {
    std::set<Cell> out;
    for (auto& [w, i] : sigma.snapshot()) {
        out.insert({w.zeta.count, w.l, w.k.bytes()});
    }
    return out;
}

std::vector<std::string> lines(const std::vector<TuplePtr>& ts) {
    std::vector<std::string> out;
    for (const auto& t : ts) {
        out.push_back(std::to_string(t->tau) + "|" + format_payload(t->payload));
    }
    return oracle::canonical(std::move(out));
}

class GoldenTraceTest : public ::testing::TestWithParam<bool> {};

TEST_P(GoldenTraceTest, LongestTweetPerHashtag) {
    bool shared = GetParam();
    auto op = hashtag_maxlen();
    SharedState<CountState> sigma(1);
    sigma.seed(Key("pink"), kNine, {CountState{11}});
    sigma.seed(Key("pink"), kNine + 30 * kMinute, {CountState{11}});
    Instance<CountState> inst(op, sigma, 0, op.mapping);
    inst.set_watermark(kNine);
    inst.rebuild_index();

    std::vector<TuplePtr> out;
    auto sink = [&](TuplePtr t) { out.push_back(std::move(t)); };
    NoReconfigHooks<Instance<CountState>> hooks;
    auto process = [&](const TuplePtr& t) {
        if (shared) {
            inst.process_vsn(t, hooks, sink);
        } else {
            inst.process_sn(t, sink);
        }
    };

    process(tweet(kNine + 58 * kMinute, "hi #red #pink"));
    EXPECT_EQ(inst.watermark(), kNine + 58 * kMinute);
    EXPECT_TRUE(out.empty());
    std::set<Cell> expected{{13, kNine, "pink"},
                            {13, kNine, "red"},
                            {13, kNine + 30 * kMinute, "pink"},
                            {13, kNine + 30 * kMinute, "red"}};
    EXPECT_EQ(cells(sigma), expected);

    process(tweet(10 * kHour + 5 * kMinute, "no tags here"));
    EXPECT_EQ(lines(out), (std::vector<std::string>{"36000000|pink,13", "36000000|red,13"}));
    std::set<Cell> remaining{{13, kNine + 30 * kMinute, "pink"}, {13, kNine + 30 * kMinute, "red"}};
    EXPECT_EQ(cells(sigma), remaining);
}

INSTANTIATE_TEST_SUITE_P(Modes, GoldenTraceTest, ::testing::Values(false, true),
                         [](const auto& info) { return info.param ? "Shared" : "Isolated"; });

TEST(InstanceTest, PipelineMatchesDirectOperatorOnTraceStream) {
    std::vector<TuplePtr> in{tweet(kNine + 5 * kMinute, "good morning #red"),
                             tweet(kNine + 40 * kMinute, "a longer one #pink #red"),
                             tweet(kNine + 58 * kMinute, "hi #red #pink"), tweet(10 * kHour + 20 * kMinute, "#pink")};
    auto direct = run_reference(hashtag_maxlen(), in);
    auto pipe = hashtag_maxlen_pipeline();
    std::vector<TuplePtr> mapped;
    for (const auto& t : in) {
        auto m = pipe.map(*t);
        mapped.insert(mapped.end(), m.begin(), m.end());
    }
    EXPECT_EQ(pipe.map(*in[2]).size(), 2u);
    EXPECT_EQ(format_payload(pipe.map(*in[2])[0]->payload), "red,13");
    auto composed = run_reference(pipe.aggregate, mapped);
    EXPECT_EQ(lines(direct), lines(composed));
    // [09:00,10:00) holds all three morning tweets.
    auto l = lines(direct);
    EXPECT_NE(std::find(l.begin(), l.end(), "36000000|red,23"), l.end());
    EXPECT_TRUE(run_reference(pipe.aggregate, {}).empty());
}

TEST(InstanceTest, IgnoresTuplesOwnedElsewhere) {
    auto op = wordcount();
    op.mapping = KeyMapping::explicit_table({0, 1}, {{"x", 1}, {"y", 1}});
    SharedState<CountState> sigma(1);
    Instance<CountState> inst(op, sigma, 0, op.mapping);
    std::vector<TuplePtr> out;
    inst.process_sn(tweet(100, "x y"), [&](TuplePtr t) { out.push_back(t); });
    EXPECT_EQ(sigma.key_count(), 0u);
    EXPECT_EQ(inst.watermark(), 100);
}

TEST(InstanceTest, OutputsCarryRightBoundaryAndStayOrdered) {
    auto op = wordcount(WindowSpec{10, 30, WindowType::Multi});
    SharedState<CountState> sigma(1);
    Instance<CountState> inst(op, sigma, 0, op.mapping);
    std::vector<TuplePtr> out;
    auto sink = [&](TuplePtr t) { out.push_back(std::move(t)); };
    for (EventTime t = 0; t < 200; t += 7) {
        inst.process_sn(tweet(t, "a b"), sink);
    }
    inst.flush(193, sink);
    ASSERT_FALSE(out.empty());
    for (std::size_t i = 0; i < out.size(); ++i) {
        EXPECT_EQ(out[i]->tau % 10, 0);
        if (i) {
            EXPECT_GE(out[i]->tau, out[i - 1]->tau);
        }
        EXPECT_GT(out[i]->tau, out[i]->source_tau);
    }
    EXPECT_EQ(inst.order_violations(), 0u);
    EXPECT_EQ(inst.causality_violations(), 0u);
    EXPECT_EQ(sigma.key_count(), 0u);
}

TEST(InstanceTest, CountsMatchBruteForceWindows) {
    auto op = wordcount(WindowSpec{10, 35, WindowType::Multi});
    std::vector<TuplePtr> in;
    std::vector<std::pair<oracle::Time, std::vector<std::pair<std::string, std::int64_t>>>> events;
    std::mt19937_64 rng(3);
    EventTime t = 0;
    const char* words[] = {"a", "b", "c", "d"};
    for (int i = 0; i < 300; ++i) {
        t += std::uniform_int_distribution<int>(0, 4)(rng);
        std::string text;
        std::set<std::string> uniq;
        for (int w = 0; w < 3; ++w) {
            std::string word = words[std::uniform_int_distribution<int>(0, 3)(rng)];
            text += word + " ";
            uniq.insert(word);
        }
        in.push_back(tweet(t, text));
        std::vector<std::pair<std::string, std::int64_t>> kv;
        for (const auto& w : uniq) {
            kv.push_back({w, 1});
        }
        events.push_back({t, kv});
    }
    auto want = oracle::windowed_aggregate(events, 10, 35, 0, [](std::int64_t a, std::int64_t b) { return a + b; });
    EXPECT_EQ(lines(run_reference(op, in)), want);
}

TEST(InstanceTest, DefaultFunctionsStoreAndPurgeTuples) {
    OperatorDef<TupleStore> op;
    op.name = "store";
    op.window = WindowSpec{5, 20, WindowType::Single};
    op.keys = [](const Tuple&) { return KeySet{Key("k")}; };
    op = with_defaults(op);
    op.output = [](const std::vector<TupleStore>& w, const Key&, EventTime) {
        return std::vector<Payload>{{static_cast<std::int64_t>(w[0].tuples.size())}};
    };
    SharedState<TupleStore> sigma(1);
    Instance<TupleStore> inst(op, sigma, 0, op.mapping);
    std::vector<TuplePtr> out;
    auto sink = [&](TuplePtr t) { out.push_back(std::move(t)); };
    for (EventTime t : {0, 3, 7, 12, 18}) {
        inst.process_sn(make_tuple(t, {std::int64_t{0}}), sink);
    }
    EXPECT_TRUE(out.empty());
    inst.process_sn(make_tuple(21, {std::int64_t{0}}), sink);
    // Window [0,20) fires with all five tuples, then slides to [5,25) which keeps 7, 12, 18 and 21.
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0]->tau, 20);
    EXPECT_EQ(std::get<std::int64_t>(out[0]->payload[0]), 5);
    auto snap = sigma.snapshot();
    ASSERT_EQ(snap.size(), 1u);
    EXPECT_EQ(snap[0].first.l, 5);
    EXPECT_EQ(snap[0].first.zeta.tuples.size(), 4u);
}

TEST(InstanceTest, SingleWindowAtBoundaryKeepsOneSlot) {
    OperatorDef<TupleStore> op;
    op.name = "store";
    op.window = WindowSpec{10, 10, WindowType::Single};
    op.keys = [](const Tuple&) { return KeySet{Key("k")}; };
    op = with_defaults(op);
    op.output = [](const std::vector<TupleStore>& w, const Key&, EventTime) {
        return std::vector<Payload>{{static_cast<std::int64_t>(w[0].tuples.size())}};
    };
    SharedState<TupleStore> sigma(1);
    Instance<TupleStore> inst(op, sigma, 0, op.mapping);
    std::vector<TuplePtr> out;
    auto sink = [&](TuplePtr t) { out.push_back(std::move(t)); };
    inst.process_sn(make_tuple(5, {std::int64_t{0}}), sink);
    inst.process_sn(make_tuple(10, {std::int64_t{0}}), sink);
    ASSERT_EQ(out.size(), 1u);
    EXPECT_EQ(out[0]->tau, 10);
    EXPECT_EQ(sigma.snapshot().size(), 1u);
    EXPECT_EQ(sigma.snapshot()[0].first.l, 10);
}

TEST(InstanceTest, ControlTuplesSetTargetOnlyWhenNewer) {
    auto op = wordcount();
    SharedState<CountState> sigma(1);
    Instance<CountState> inst(op, sigma, 0, op.mapping, 2);
    auto spec2 = std::make_shared<ReconfigSpec>(ReconfigSpec{2, KeyMapping::hash_mod({0, 1})});
    auto spec3 = std::make_shared<ReconfigSpec>(ReconfigSpec{3, KeyMapping::hash_mod({0, 1})});
    auto spec4 = std::make_shared<ReconfigSpec>(ReconfigSpec{4, KeyMapping::hash_mod({0, 1, 2})});
    inst.prepare_reconfig(*make_control_tuple(500, spec2));
    EXPECT_FALSE(inst.reconfig_pending());
    EXPECT_EQ(inst.gamma(), kMaxTime);
    inst.prepare_reconfig(*make_control_tuple(500, spec3));
    EXPECT_EQ(inst.gamma(), 500);
    inst.prepare_reconfig(*make_control_tuple(600, spec4));
    EXPECT_EQ(inst.pending()->epoch, 4u);
    EXPECT_EQ(inst.gamma(), 600);
}

TEST(InstanceTest, SchemaMismatchIsAConfigurationFault) {
    auto op = wordcount();
    op.output = [](const std::vector<CountState>&, const Key&, EventTime) {
        return std::vector<Payload>{{std::int64_t{1}}};
    };
    SharedState<CountState> sigma(1);
    Instance<CountState> inst(op, sigma, 0, op.mapping);
    auto sink = [](TuplePtr) {};
    inst.process_sn(tweet(0, "a"), sink);
    EXPECT_THROW(inst.process_sn(tweet(500 * kSecond, "a"), sink), ConfigError);
}

TEST(SharedStateTest, SlotOperations) {
    SharedState<CountState> sigma(1);
    auto& e = sigma.find_or_create(Key("k"));
    sigma.check_and_create(e, 20).states[0].count = 2;
    sigma.check_and_create(e, 10).states[0].count = 1;
    sigma.check_and_create(e, 30);
    EXPECT_EQ(sigma.check_and_create(e, 20).states[0].count, 2);
    ASSERT_EQ(e.slots.size(), 3u);
    EXPECT_EQ(e.slots[0].l, 10);
    EXPECT_EQ(e.slots[2].l, 30);
    sigma.remove_first(e);
    sigma.shift_first(e, {CountState{7}}, 10);
    EXPECT_EQ(e.slots[0].l, 30);
    EXPECT_THROW(sigma.set(e.slots[0], {}), ConfigError);
    EXPECT_EQ(sigma.find(Key("nope")), nullptr);
}

TEST(SharedStateTest, WriterGuardFlagsOverlap) {
    SharedState<CountState> sigma(1);
    sigma.enable_writer_check(true);
    auto& e = sigma.find_or_create(Key("k"));
    {
        WriterGuard<CountState> a(sigma, e, 0);
        WriterGuard<CountState> b(sigma, e, 1);
    }
    EXPECT_EQ(sigma.writer_violations(), 1u);
    {
        WriterGuard<CountState> c(sigma, e, 1);
    }
    EXPECT_EQ(sigma.writer_violations(), 1u);
}

}  // namespace
}  // namespace vsn
