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

// End-to-end checks, one PASS/FAIL line per criterion. Exit status is the number of failures.

#include <vsn/bench.hpp>
#include <vsn/operator.hpp>
#include <vsn/operators.hpp>
#include <vsn/runtime.hpp>
#include <vsn/workloads.hpp>

#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "engine_harness.hpp"
#include "gate_harness.hpp"
#include "oracles.hpp"

using namespace vsn;

namespace {

struct Outcome {
    bool ok = true;
    std::string detail;

    void require(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            detail += (detail.empty() ? "" : "; ") + what;
        }
    }
    void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

int failures = 0;

/// Causality violations (an output not later than one of its inputs) across the runs of 1, 2 and 4.
std::uint64_t causality_total = 0;
std::uint64_t causality_runs = 0;

void record_causality(std::uint64_t v) {
    causality_total += v;
    ++causality_runs;
}

void criterion(int number, const char* name, double limit_s, const std::function<Outcome()>& body) {
    auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = body();
    } catch (const std::exception& e) {
        o.ok = false;
        o.detail = std::string("exception: ") + e.what();
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (limit_s > 0 && secs >= limit_s) {
        o.ok = false;
        o.note("over the " + std::to_string(static_cast<int>(limit_s)) + " s budget");
    }
    failures += !o.ok;
    std::printf("%s %d %s (%.2f s) %s\n", o.ok ? "PASS" : "FAIL", number, name, secs, o.detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

// 1. Longest tweet per hashtag, seeded with pink windows at 09:00 and 09:30.

Outcome golden_trace() {
    Outcome o;
    constexpr EventTime hour = 60 * kMinute;
    constexpr EventTime nine = 9 * hour;
    using Cell = std::tuple<std::int64_t, EventTime, std::string>;
    std::set<Cell> expected{{13, nine, "pink"},
                            {13, nine, "red"},
                            {13, nine + 30 * kMinute, "pink"},
                            {13, nine + 30 * kMinute, "red"}};
    for (bool shared : {false, true}) {
        auto op = hashtag_maxlen();
        SharedState<CountState> sigma(1);
        sigma.seed(Key("pink"), nine, {CountState{11}});
        sigma.seed(Key("pink"), nine + 30 * kMinute, {CountState{11}});
        Instance<CountState> inst(op, sigma, 0, op.mapping);
        inst.set_watermark(nine);
        inst.rebuild_index();
        std::vector<TuplePtr> out;
        auto sink = [&](TuplePtr t) { out.push_back(std::move(t)); };
        NoReconfigHooks<Instance<CountState>> hooks;
        auto process = [&](TuplePtr t) {
            if (shared) {
                inst.process_vsn(t, hooks, sink);
            } else {
                inst.process_sn(t, sink);
            }
        };
        process(make_tuple(nine + 58 * kMinute, {std::string("C"), std::string("hi #red #pink")}));
        std::set<Cell> got;
        for (auto& [w, i] : sigma.snapshot()) {
            got.insert({w.zeta.count, w.l, w.k.bytes()});
        }
        const char* mode = shared ? "shared" : "isolated";
        o.require(got == expected, std::string(mode) + " final state differs");
        o.require(inst.watermark() == nine + 58 * kMinute, std::string(mode) + " watermark is not 09:58");
        o.require(out.empty(), std::string(mode) + " emitted before any window expired");
        // A later tuple expires the 09:00 windows; their outputs must come after every input.
        process(make_tuple(10 * hour + 5 * kMinute, {std::string("C"), std::string("done")}));
        o.require(out.size() == 2, std::string(mode) + " expected two outputs for the 09:00 windows");
        record_causality(inst.causality_violations());
    }
    if (o.ok) {
        o.note("state {13 x 09:00,09:30 x pink,red}, W=09:58 in both modes");
    }
    return o;
}

// 2. SN and VSN output multisets equal the single-threaded reference.

std::vector<TuplePtr> narrow_join(std::vector<TuplePtr> in, std::int64_t domain) {
    for (auto& t : in) {
        auto c = std::make_shared<Tuple>(*t);
        c->payload[0] = std::get<std::int64_t>(c->payload[0]) % domain;
        c->payload[1] = std::fmod(std::get<double>(c->payload[1]), static_cast<double>(domain));
        t = c;
    }
    return in;
}

/// Text stream spanning about five windows of the operator.
std::vector<TuplePtr> text_stream(std::size_t n, Duration ws, std::uint64_t seed) {
    auto rate = std::max<std::int64_t>(1, static_cast<std::int64_t>(n) * 1000 / (5 * ws));
    return gen_text_stream(seed, constant_rate(n, rate));
}

template <class State>
void check_equivalence(Outcome& o, const std::string& name, const OperatorDef<State>& op,
                       const std::vector<TuplePtr>& in) {
    auto reference = harness::lines(run_reference(op, in));
    auto ref_digest = output_digest(reference);
    std::size_t agree = 0;
    for (std::size_t n : {1, 2, 4}) {
        EngineConfig cfg;
        cfg.initial = n;
        cfg.max = n;
        cfg.ingress_sources = 2;
        cfg.check_exclusivity = true;
        auto vsn = harness::run_vsn(op, in, cfg);
        auto sn = harness::run_sn(op, in, n, 2);
        record_causality(vsn.causality_violations);
        record_causality(sn.causality_violations);
        bool same = output_digest(vsn.lines) == ref_digest && output_digest(sn.lines) == ref_digest;
        o.require(same, name + " n=" + std::to_string(n) + " digest differs");
        o.require(vsn.writer_violations == 0, name + " writer exclusivity violated");
        agree += same;
    }
    o.note(name + " " + std::to_string(reference.size()) + " outputs " + ref_digest.substr(0, 8) + " x" +
           std::to_string(agree));
}

Outcome equivalence() {
    Outcome o;
    constexpr std::size_t n = 10000;
    auto hm = hashtag_maxlen();
    check_equivalence(o, "hashtag-maxlen", hm, text_stream(n, hm.window.size, 21));
    auto wc = wordcount();
    auto text = text_stream(n, wc.window.size, 22);
    check_equivalence(o, "wordcount", wc, text);
    check_equivalence(o, "paircount-3", paircount(3), text);
    check_equivalence(o, "paircount-10", paircount(10), text);
    check_equivalence(o, "paircount-inf", paircount(kUnboundedDistance), text);
    auto joins = narrow_join(gen_join_stream(23, constant_rate(n, 1000)), 1000);
    check_equivalence(o, "scalejoin", scalejoin(1000, band_match, kSecond), joins);
    check_equivalence(o, "passthrough", passthrough(4), joins);
    return o;
}

// 3. Merge buffer under concurrent sources and readers.

Outcome gate_stress() {
    Outcome o;
    std::uint64_t delivered = 0;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        auto run = harness::concurrent_transcripts(seed, 4, 4, 100000);
        o.require(run.ok, "seed " + std::to_string(seed) + ": " + run.failure);
        delivered += run.delivered;
    }
    o.require(delivered == 20ULL * 4 * 4 * 100000, "delivery count off");
    o.note(std::to_string(delivered) + " deliveries over 20 seeds");
    return o;
}

// 4. Scale out then in while joining; output must equal a static run.

Outcome elastic() {
    Outcome o;
    constexpr std::size_t n = 20000;
    auto op = scalejoin(1000, band_match, 5 * kSecond);
    auto in = narrow_join(gen_join_stream(31, constant_rate(n, 1000)), 1000);

    EngineConfig fixed;
    fixed.initial = 1;
    fixed.max = 1;
    fixed.check_exclusivity = true;
    auto reference = harness::run_vsn(op, in, fixed);
    record_causality(reference.causality_violations);

    EngineConfig cfg;
    cfg.initial = 2;
    cfg.max = 4;
    cfg.check_exclusivity = true;
    auto r = harness::run_vsn(op, in, cfg, {{n / 3, 4}, {2 * n / 3, 1}});
    record_causality(r.causality_violations);

    o.require(r.steps_accepted == 2, "only " + std::to_string(r.steps_accepted) + " of 2 reconfigurations accepted");
    o.require(r.final_epoch == 2, "final epoch " + std::to_string(r.final_epoch));
    o.require(output_digest(r.lines) == output_digest(reference.lines), "digest differs from the static run");
    o.require(r.lines == harness::lines(run_reference(op, in)), "static run differs from the reference");
    o.require(r.writer_violations == 0, std::to_string(r.writer_violations) + " writer exclusivity violations");
    o.require(r.egress_order_violations == 0, "egress out of order");

    // Epoch 0 runs on {0,1}, epoch 1 on {0..3}, epoch 2 on {0}; members leaving at 2 still see it.
    std::vector<std::vector<Epoch>> want = {{0, 1, 2}, {0, 1, 2}, {1, 2}, {1, 2}};
    o.require(r.epoch_logs == want, "epoch logs differ from the expected membership history");

    std::size_t checked = 0;
    for (const auto& a : r.activations) {
        if (a.first_output_tau == kMinTime) {
            continue;
        }
        ++checked;
        o.require(a.first_output_tau > a.trigger_tau,
                  "instance " + std::to_string(a.instance) + " emitted at or before its trigger");
    }
    o.require(r.activations.size() == 2, "expected two activations");
    std::string ms;
    for (double d : r.reconfig_ms) {
        ms += fmt(" %.1f", d);
    }
    o.note(std::to_string(r.lines.size()) + " outputs, " + std::to_string(checked) +
           " activations with output, switch ms:" + ms);
    return o;
}

// 5. One buffer insertion per input in VSN; one copy per receiving instance in SN.

Outcome forwarding() {
    Outcome o;
    auto op = paircount(kUnboundedDistance, {10 * kSecond, 20 * kSecond, WindowType::Multi});
    auto in = gen_text_stream(41, constant_rate(10000, 200));
    EngineConfig cfg;
    cfg.initial = 4;
    cfg.max = 4;
    auto vsn = harness::run_vsn(op, in, cfg);
    auto sn = harness::run_sn(op, in, 4);
    o.require(vsn.insertions == in.size(), "vsn insertions " + std::to_string(vsn.insertions));
    o.require(sn.insertions >= 2 * in.size(), "sn enqueues " + std::to_string(sn.insertions));
    o.require(vsn.lines == sn.lines, "outputs differ");
    o.note("inputs " + std::to_string(in.size()) + ", vsn insertions " + std::to_string(vsn.insertions) +
           ", sn enqueues " + std::to_string(sn.insertions) +
           fmt(" (%.2fx)", static_cast<double>(sn.insertions) / static_cast<double>(in.size())));
    return o;
}

// 6. Band predicate selectivity on generated tuples.

Outcome selectivity() {
    Outcome o;
    constexpr std::uint64_t evaluations = 10000000;
    constexpr std::uint64_t seed = 42;
    std::uint64_t matches = 0;
    for (std::uint64_t i = 0; i < evaluations; ++i) {
        auto l = join_tuple(seed, 2 * i, 0);
        auto r = join_tuple(seed, 2 * i + 1, 0);
        matches += band_match(*l, *r);
    }
    double p1 = oracle::band_probability_counted(kJoinDomain, 10);
    double expected = p1 * p1;
    double rate = static_cast<double>(matches) / static_cast<double>(evaluations);
    o.require(std::fabs(rate - expected) <= 0.2 * expected, "rate outside +-20%");
    double sigma = std::sqrt(static_cast<double>(evaluations) * expected);
    o.note(std::to_string(matches) + " matches" + fmt(", rate %.3e", rate) + fmt(" vs %.3e", expected) +
           fmt(" (%+.2f sigma)", (static_cast<double>(matches) - static_cast<double>(evaluations) * expected) / sigma));
    return o;
}

// 7. Time to provision 2 -> 4 on a join fed in real time.

Outcome reconfig_latency() {
    Outcome o;
    constexpr int trials = 10;
    constexpr std::int64_t rate = 2000;
    std::vector<double> durations;
    for (int trial = 0; trial < trials; ++trial) {
        auto op = scalejoin(1000, band_match, kSecond);
        EngineConfig cfg;
        cfg.initial = 2;
        cfg.max = 4;
        Engine<JoinState> engine(op, cfg);
        Egress egress(engine.output()->gate(), 0, {}, false);
        auto seed = static_cast<std::uint64_t>(70 + trial);
        auto start = std::chrono::steady_clock::now();
        std::atomic<bool> stop{false};
        std::thread feeder([&] {
            for (std::uint64_t i = 0; !stop.load(); ++i) {
                auto tau = static_cast<EventTime>(i) * 1000 / rate;
                std::this_thread::sleep_until(start + std::chrono::milliseconds(tau));
                auto t = std::const_pointer_cast<Tuple>(join_tuple(seed, i, tau));
                t->origin_ns = steady_ns();
                engine.add(std::move(t), 0);
            }
            engine.close_source(0);
        });
        // Let the window fill before switching.
        std::this_thread::sleep_until(start + std::chrono::milliseconds(1500));
        engine.sample_loads();
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
        auto loads = engine.sample_loads();
        auto status = engine.reconfigure_to(4);
        bool done = status == ReconfigStatus::Accepted && engine.wait_reconfig(std::chrono::seconds(10));
        std::this_thread::sleep_for(std::chrono::milliseconds(200));
        stop = true;
        feeder.join();
        engine.join();
        egress.join();
        o.require(done, "trial " + std::to_string(trial) + " did not complete");
        auto d = engine.reconfig_durations();
        if (done && !d.empty()) {
            durations.push_back(d.front());
        }
        if (trial == 0) {
            double load = 0;
            for (double l : loads) {
                load += l;
            }
            o.note(fmt("load before switch %.2f", loads.empty() ? 0.0 : load / static_cast<double>(loads.size())));
        }
    }
    std::sort(durations.begin(), durations.end());
    double median = durations.empty() ? 1e9
                                      : (durations[(durations.size() - 1) / 2] + durations[durations.size() / 2]) / 2;
    o.require(durations.size() == trials, "missing trials");
    o.require(median < 500, "median over 500 ms");
    o.note(fmt("median %.1f ms", median) + fmt(", min %.1f", durations.empty() ? 0 : durations.front()) +
           fmt(", max %.1f", durations.empty() ? 0 : durations.back()));
    return o;
}

// 8. Window boundaries against brute force, and output-after-input on the runs of 1, 2 and 4.

Outcome window_arithmetic() {
    Outcome o;
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<std::int64_t> tau_d(0, 100000);
    std::uniform_int_distribution<std::int64_t> wa_d(1, 500);
    std::size_t mismatches = 0;
    for (int i = 0; i < 10000; ++i) {
        auto wa = wa_d(rng);
        auto ws = wa * std::uniform_int_distribution<std::int64_t>(1, 8)(rng) +
                  (i % 3 == 0 ? std::uniform_int_distribution<std::int64_t>(0, wa - 1)(rng) : 0);
        auto tau = tau_d(rng);
        auto type = ws == wa ? WindowType::Single : WindowType::Multi;
        WindowSpec spec{wa, ws, type};
        if (window_left_boundaries(tau, spec) != oracle::enumerate_boundaries(tau, wa, ws)) {
            ++mismatches;
        }
    }
    o.require(mismatches == 0, std::to_string(mismatches) + " boundary mismatches");
    o.require(causality_runs > 0, "no runs recorded");
    o.require(causality_total == 0, std::to_string(causality_total) + " outputs not after their inputs");
    o.note("10000 cases; " + std::to_string(causality_runs) + " operator runs with " +
           std::to_string(causality_total) + " ordering violations");
    return o;
}

// 9. Controller decisions.

Outcome controller() {
    Outcome o;
    ThresholdController c;
    auto d1 = c.decide({0.95, 0.95}, 8);
    auto d2 = c.decide({0.6, 0.6, 0.6}, 8);
    auto d3 = c.decide(std::vector<double>(8, 0.2), 8);
    o.require(d1 == std::optional<std::size_t>(3), "2 at 95% should give 3");
    o.require(!d2, "60% should keep the count");
    o.require(d3 == std::optional<std::size_t>(3), "8 at 20% should give 3");
    std::size_t grid = 0;
    for (std::size_t n = 1; n <= 8; ++n) {
        for (int pct = 0; pct <= 100; ++pct) {
            double avg = pct / 100.0;
            auto got = c.decide(std::vector<double>(n, avg), 8);
            std::optional<std::size_t> want;
            if (avg > 0.9 || avg < 0.45) {
                auto k = oracle::smallest_count_under(n, avg, 0.7, 8);
                if ((avg > 0.9 && k > n) || (avg < 0.45 && k < n)) {
                    want = k;
                }
            }
            o.require(got == want, "n=" + std::to_string(n) + " load " + std::to_string(pct) + "%");
            ++grid;
        }
    }
    o.note("closed forms hold; " + std::to_string(grid) + " grid cases agree with search");
    return o;
}

}  // namespace

int main() {
    criterion(1, "golden trace", 1, golden_trace);
    criterion(2, "sn/vsn equivalence", 120, equivalence);
    criterion(3, "merge buffer stress", 60, gate_stress);
    criterion(4, "elastic correctness", 120, elastic);
    criterion(5, "duplication-free forwarding", 30, forwarding);
    criterion(6, "join selectivity", 30, selectivity);
    criterion(7, "reconfiguration latency", 0, reconfig_latency);
    criterion(8, "window arithmetic", 10, window_arithmetic);
    criterion(9, "threshold controller", 1, controller);
    std::printf("%d of 9 criteria failed\n", failures);
    return failures;
}
