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

#pragma once

#include <vsn/operators.hpp>
#include <vsn/runtime.hpp>
#include <vsn/workloads.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <variant>
#include <vector>

namespace vsn {

/// Scripted reconfiguration: switch to `count` instances once the input reaches event time `at_ms`.
struct ReconfigStep {
    Duration at_ms = 0;
    std::size_t count = 1;
};

/// Parses "10s:4,20s:1".
inline std::vector<ReconfigStep> parse_reconfig(std::string_view spec) {
    std::vector<ReconfigStep> out;
    while (!spec.empty()) {
        auto comma = spec.find(',');
        auto item = detail::trim(spec.substr(0, comma));
        spec = comma == std::string_view::npos ? std::string_view{} : spec.substr(comma + 1);
        auto colon = item.find(':');
        if (colon == std::string_view::npos) {
            throw ConfigError("reconfiguration '" + std::string(item) + "' is not TIME:COUNT");
        }
        ReconfigStep step;
        step.at_ms = parse_duration_ms(item.substr(0, colon));
        auto count = detail::parse_int(detail::trim(item.substr(colon + 1)), "instance count");
        if (step.at_ms < 0 || count < 1) {
            throw ConfigError("reconfiguration needs a time >= 0 and a count >= 1");
        }
        step.count = static_cast<std::size_t>(count);
        if (!out.empty() && step.at_ms < out.back().at_ms) {
            throw ConfigError("reconfigurations must be listed in time order");
        }
        out.push_back(step);
    }
    return out;
}

/// Parses "lower,target,upper" as fractions.
inline Thresholds parse_thresholds(std::string_view spec) {
    std::vector<double> v;
    std::string s(spec);
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        try {
            std::size_t used = 0;
            v.push_back(std::stod(item, &used));
            if (used != item.size()) {
                throw ConfigError("");
            }
        } catch (const std::exception&) {
            throw ConfigError("bad threshold '" + item + "'");
        }
    }
    if (v.size() != 3) {
        throw ConfigError("thresholds take three values: lower,target,upper");
    }
    Thresholds t{v[2], v[1], v[0]};
    ThresholdController check(t);
    return t;
}

inline std::size_t parse_pair_distance(std::string_view s) {
    if (s == "inf" || s == "unbounded") {
        return kUnboundedDistance;
    }
    auto d = detail::parse_int(s, "pair distance");
    if (d < 1) {
        throw ConfigError("pair distance must be >= 1");
    }
    return static_cast<std::size_t>(d);
}

struct BenchConfig {
    std::string op = "wordcount";
    std::string mode = "vsn";
    std::size_t instances = 1;
    /// Instances the engine can grow to; 0 picks the largest count the run asks for.
    std::size_t max = 0;
    std::optional<Duration> wa;
    std::optional<Duration> ws;
    std::optional<WindowType> wt;
    /// paircount only.
    std::size_t pair_distance = 3;
    /// scalejoin only.
    std::size_t join_keys = 1000;
    /// "synthetic", or "trades" for scalejoin with the hedge predicate.
    std::string dataset = "synthetic";
    std::vector<RatePhase> phases = {{10, 1000}};
    std::vector<ReconfigStep> reconfig;
    std::string controller = "none";
    Thresholds thresholds;
    Duration control_period_ms = 1000;
    std::uint64_t seed = 1;
    /// Feed as fast as the engine accepts instead of pacing tuples by their event time.
    bool virtual_time = false;
    std::string replay;
    std::string csv;
    std::size_t sources = 1;
    /// Input buffer bound; keeps a virtual-time feed close to what the workers have processed.
    std::uint64_t flow_bound = 8192;

    std::size_t max_instances() const {
        if (max != 0) {
            return max;
        }
        std::size_t m = instances;
        for (const auto& s : reconfig) {
            m = std::max(m, s.count);
        }
        return m;
    }

    void validate() const {
        static const char* ops[] = {"hashtag-maxlen", "wordcount", "paircount", "scalejoin", "passthrough"};
        if (std::find(std::begin(ops), std::end(ops), op) == std::end(ops)) {
            throw ConfigError("unknown operator '" + op +
                              "' (expected hashtag-maxlen, wordcount, paircount, scalejoin or passthrough)");
        }
        if (mode != "vsn" && mode != "sn") {
            throw ConfigError("unknown mode '" + mode + "' (expected sn or vsn)");
        }
        if (controller != "none" && controller != "threshold") {
            throw ConfigError("unknown controller '" + controller + "' (expected none or threshold)");
        }
        if (dataset != "synthetic" && dataset != "trades") {
            throw ConfigError("unknown dataset '" + dataset + "' (expected synthetic or trades)");
        }
        if (dataset == "trades" && op != "scalejoin") {
            throw ConfigError("the trades dataset feeds scalejoin only");
        }
        if (instances < 1 || sources < 1 || join_keys < 1 || flow_bound < 1) {
            throw ConfigError("instances, sources, join keys and flow bound must be >= 1");
        }
        if (max_instances() < instances) {
            throw ConfigError("--max is below --instances");
        }
        for (const auto& s : reconfig) {
            if (s.count > max_instances()) {
                throw ConfigError("reconfiguration to " + std::to_string(s.count) + " exceeds --max");
            }
        }
        if (mode == "sn" && (!reconfig.empty() || controller != "none")) {
            throw ConfigError("sn mode runs a fixed number of instances; drop --reconfig/--controller");
        }
        if (control_period_ms < 1) {
            throw ConfigError("control period must be positive");
        }
        if (op == "passthrough" && (wa || ws || wt)) {
            throw ConfigError("passthrough has no window to configure");
        }
        if (op == "scalejoin" && ((wa && *wa != 1) || (wt && *wt != WindowType::Single))) {
            throw ConfigError("scalejoin slides a single window by 1 ms");
        }
    }
};

struct MetricsRow {
    std::int64_t wallclock_s = 0;
    double input_rate = 0;
    double throughput = 0;
    double latency_avg_ms = 0;
    double latency_p99_ms = 0;
    std::size_t active_instances = 0;
    Epoch epoch = 0;
    /// Empty, or the events of this second joined by ';'.
    std::string event;
};

inline const char* csv_header() {
    return "wallclock_s,input_rate,throughput,latency_avg_ms,latency_p99_ms,active_instances,epoch,event";
}

inline std::string to_csv(const MetricsRow& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%lld,%.0f,%.0f,%.3f,%.3f,%zu,%llu,", static_cast<long long>(r.wallclock_s),
                  r.input_rate, r.throughput, r.latency_avg_ms, r.latency_p99_ms, r.active_instances,
                  static_cast<unsigned long long>(r.epoch));
    return buf + r.event;
}

/// FNV-1a over the sorted lines, so equal multisets hash equally whatever the emission order.
inline std::string output_digest(std::vector<std::string> lines) {
    std::sort(lines.begin(), lines.end());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](unsigned char c) {
        h ^= c;
        h *= 0x100000001b3ULL;
    };
    for (const auto& l : lines) {
        for (unsigned char c : l) {
            mix(c);
        }
        mix('\n');
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string output_line(const Tuple& t) { return std::to_string(t.tau) + "|" + format_payload(t.payload); }

struct BenchSummary {
    std::string op;
    std::string mode;
    std::uint64_t inputs = 0;
    std::uint64_t outputs = 0;
    /// Tuples merged into input buffers: one per input in vsn mode, one per receiving instance in sn mode.
    std::uint64_t insertions = 0;
    std::size_t instances_start = 0;
    std::size_t instances_end = 0;
    std::vector<double> reconfig_ms;
    double wall_s = 0;
    std::string digest;
    std::vector<MetricsRow> rows;
};

inline std::string format_summary(const BenchSummary& s) {
    std::ostringstream o;
    o << "op: " << s.op << "\n"
      << "mode: " << s.mode << "\n"
      << "instances: " << s.instances_start << " -> " << s.instances_end << "\n"
      << "inputs: " << s.inputs << "\n"
      << "outputs: " << s.outputs << "\n"
      << "insertions: " << s.insertions << "\n"
      << "reconfigurations: " << s.reconfig_ms.size() << "\n"
      << "reconfig_ms:";
    for (double d : s.reconfig_ms) {
        char buf[32];
        std::snprintf(buf, sizeof buf, " %.3f", d);
        o << buf;
    }
    char wall[32];
    std::snprintf(wall, sizeof wall, "%.3f", s.wall_s);
    o << "\n"
      << "rows: " << s.rows.size() << "\n"
      << "wall_s: " << wall << "\n"
      << "digest: " << s.digest << "\n";
    return o.str();
}

/// Copy of a schema with every field name prefixed, so a self-join has distinct output fields.
inline Schema prefixed(const Schema& s, const std::string& prefix) {
    auto fields = s.fields();
    for (auto& f : fields) {
        f.name = prefix + f.name;
    }
    return Schema(prefix + s.name(), std::move(fields));
}

using AnyOperator = std::variant<OperatorDef<CountState>, OperatorDef<JoinState>, OperatorDef<PassState>>;

inline WindowSpec apply_overrides(WindowSpec w, const BenchConfig& cfg) {
    if (cfg.wa) {
        w.advance = *cfg.wa;
    }
    if (cfg.ws) {
        w.size = *cfg.ws;
    }
    if (cfg.wt) {
        w.type = *cfg.wt;
    }
    w.validate();
    return w;
}

inline AnyOperator make_operator(const BenchConfig& cfg) {
    if (cfg.op == "hashtag-maxlen") {
        return hashtag_maxlen(apply_overrides({30 * kMinute, 60 * kMinute, WindowType::Multi}, cfg));
    }
    if (cfg.op == "wordcount") {
        return wordcount(apply_overrides({60 * kSecond, 120 * kSecond, WindowType::Multi}, cfg));
    }
    if (cfg.op == "paircount") {
        return paircount(cfg.pair_distance, apply_overrides({60 * kSecond, 120 * kSecond, WindowType::Multi}, cfg));
    }
    if (cfg.op == "scalejoin") {
        Duration ws = cfg.ws.value_or(5 * kSecond);
        if (ws < 1) {
            throw ConfigError("window size must be positive");
        }
        if (cfg.dataset == "trades") {
            return scalejoin(cfg.join_keys, hedge_match, ws, prefixed(trade_schema(), "left_"),
                             prefixed(trade_schema(), "right_"));
        }
        return scalejoin(cfg.join_keys, band_match, ws);
    }
    if (cfg.op == "passthrough") {
        return passthrough(std::max<std::size_t>(cfg.max_instances(), 1));
    }
    throw ConfigError("unknown operator '" + cfg.op + "'");
}

/// Reads a replay file: one "tau,fields..." line per tuple. Join lines pick their side by field
/// count; trade lines alternate sides like the generator.
inline std::vector<TuplePtr> read_replay(const BenchConfig& cfg) {
    std::ifstream in(cfg.replay);
    if (!in) {
        throw ConfigError("cannot open replay file '" + cfg.replay + "'");
    }
    bool text = cfg.op != "scalejoin" && cfg.op != "passthrough";
    bool trades = cfg.dataset == "trades";
    auto left = join_left_schema();
    auto right = join_right_schema();
    auto trade = trade_schema();
    auto tweet = tweet_schema();
    std::vector<TuplePtr> out;
    std::string line;
    std::size_t number = 0;
    EventTime last = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty() || line[0] == '#') {
            continue;
        }
        TuplePtr t;
        try {
            if (text) {
                t = parse_tuple(line, tweet);
            } else if (trades) {
                t = parse_tuple(line, trade, static_cast<std::uint32_t>(out.size() % 2));
            } else {
                bool is_left = detail::split_fields(line).size() == left.size() + 1;
                t = parse_tuple(line, is_left ? left : right, is_left ? 0 : 1);
            }
        } catch (const std::exception& e) {
            throw ConfigError(cfg.replay + ":" + std::to_string(number) + ": " + e.what());
        }
        if (t->tau < last) {
            throw ConfigError(cfg.replay + ":" + std::to_string(number) + ": timestamps must not decrease");
        }
        last = t->tau;
        out.push_back(std::move(t));
    }
    return out;
}

inline std::vector<TuplePtr> make_input(const BenchConfig& cfg) {
    if (!cfg.replay.empty()) {
        return read_replay(cfg);
    }
    Schedule schedule(cfg.phases);
    if (cfg.dataset == "trades") {
        return gen_trades_stream(cfg.seed, schedule);
    }
    if (cfg.op == "scalejoin" || cfg.op == "passthrough") {
        return gen_join_stream(cfg.seed, schedule);
    }
    return gen_text_stream(cfg.seed, schedule);
}

namespace detail {

/// What the benchmark loop needs from either execution mode.
template <class State>
class BenchTarget {
public:
    BenchTarget(const OperatorDef<State>& op, const BenchConfig& cfg) {
        if (cfg.mode == "vsn") {
            EngineConfig ec;
            ec.initial = cfg.instances;
            ec.max = cfg.max_instances();
            ec.ingress_sources = cfg.sources;
            ec.flow_bound = cfg.flow_bound;
            vsn_ = std::make_unique<Engine<State>>(op, ec);
        } else {
            sn_ = std::make_unique<SnEngine<State>>(op, SnConfig{cfg.instances, cfg.sources, 1, cfg.flow_bound});
        }
        instances_ = cfg.instances;
    }

    Engine<State>* vsn() { return vsn_.get(); }
    ScaleGate& output() { return vsn_ ? vsn_->output()->gate() : sn_->output(); }

    void add(TuplePtr t, SourceId i) { vsn_ ? vsn_->add(std::move(t), i) : sn_->add(std::move(t), i); }
    void close_source(SourceId i) { vsn_ ? vsn_->close_source(i) : sn_->close_source(i); }
    void join() { vsn_ ? vsn_->join() : sn_->join(); }

    std::size_t active() const { return vsn_ ? vsn_->metrics().active_instances : instances_; }
    Epoch epoch() const { return vsn_ ? vsn_->metrics().epoch : 0; }
    std::uint64_t reconfigurations() const { return vsn_ ? vsn_->metrics().reconfigurations : 0; }
    std::uint64_t inputs() const { return vsn_ ? vsn_->metrics().input_tuples : sn_->input_tuples(); }
    std::uint64_t insertions() const { return vsn_ ? vsn_->input()->gate().insertions() : sn_->insertions(); }
    std::vector<double> reconfig_ms() const { return vsn_ ? vsn_->reconfig_durations() : std::vector<double>{}; }

private:
    std::unique_ptr<Engine<State>> vsn_;
    std::unique_ptr<SnEngine<State>> sn_;
    std::size_t instances_ = 1;
};

/// Turns counter deltas into one row per second.
template <class State>
class Sampler {
public:
    Sampler(BenchTarget<State>& target, Egress& egress) : target_(target), egress_(egress) {}

    void event(const std::string& e) {
        std::lock_guard lock(mutex_);
        events_.push_back(e);
    }

    void sample(std::int64_t second, std::uint64_t fed) {
        MetricsRow r;
        r.wallclock_s = second;
        r.input_rate = static_cast<double>(fed - last_fed_);
        last_fed_ = fed;
        auto outputs = egress_.count();
        r.throughput = static_cast<double>(outputs - last_outputs_);
        last_outputs_ = outputs;
        auto lat = egress_.take_latencies();
        if (!lat.empty()) {
            double sum = 0;
            for (double l : lat) {
                sum += l;
            }
            r.latency_avg_ms = sum / static_cast<double>(lat.size());
            auto p = static_cast<std::size_t>(0.99 * static_cast<double>(lat.size() - 1));
            std::nth_element(lat.begin(), lat.begin() + static_cast<std::ptrdiff_t>(p), lat.end());
            r.latency_p99_ms = lat[p];
        }
        r.active_instances = target_.active();
        r.epoch = target_.epoch();
        auto done = target_.reconfigurations();
        std::lock_guard lock(mutex_);
        for (; done_seen_ < done; ++done_seen_) {
            events_.push_back("reconfig_done");
        }
        for (const auto& e : events_) {
            r.event += (r.event.empty() ? "" : ";") + e;
        }
        events_.clear();
        rows_.push_back(std::move(r));
    }

    std::vector<MetricsRow> take_rows() {
        std::lock_guard lock(mutex_);
        return std::move(rows_);
    }

private:
    BenchTarget<State>& target_;
    Egress& egress_;
    std::mutex mutex_;
    std::vector<std::string> events_;
    std::vector<MetricsRow> rows_;
    std::uint64_t last_fed_ = 0;
    std::uint64_t last_outputs_ = 0;
    std::uint64_t done_seen_ = 0;
};

template <class State>
BenchSummary run_operator(const OperatorDef<State>& op, const BenchConfig& cfg, const std::vector<TuplePtr>& input) {
    using clock = std::chrono::steady_clock;
    BenchTarget<State> target(op, cfg);
    Egress egress(target.output(), 0);
    Sampler<State> sampler(target, egress);

    std::unique_ptr<ThresholdController> controller;
    std::unique_ptr<ControlLoop<Engine<State>>> loop;
    if (cfg.controller == "threshold") {
        controller = std::make_unique<ThresholdController>(cfg.thresholds);
        loop = std::make_unique<ControlLoop<Engine<State>>>(
            *target.vsn(), *controller, std::chrono::milliseconds(cfg.control_period_ms),
            [&sampler](std::size_t, std::size_t) { sampler.event("reconfig_start"); });
    }

    std::atomic<std::uint64_t> fed{0};
    auto start = clock::now();

    // Paced runs are sampled on the wall clock by their own thread; virtual runs whenever the
    // feed crosses a second of event time.
    std::mutex tick_mutex;
    std::condition_variable tick_cv;
    bool feeding = true;
    std::thread ticker;
    if (!cfg.virtual_time) {
        ticker = std::thread([&] {
            std::unique_lock lock(tick_mutex);
            for (std::int64_t s = 1;; ++s) {
                if (tick_cv.wait_until(lock, start + std::chrono::seconds(s), [&] { return !feeding; })) {
                    return;
                }
                sampler.sample(s, fed.load());
            }
        });
    }

    std::size_t next_step = 0;
    std::int64_t second = 0;
    EventTime origin = input.empty() ? 0 : input.front()->tau;
    for (std::size_t i = 0; i < input.size(); ++i) {
        EventTime offset = input[i]->tau - origin;
        if (cfg.virtual_time) {
            while (offset >= (second + 1) * 1000) {
                sampler.sample(++second, fed.load());
            }
        } else {
            std::this_thread::sleep_until(start + std::chrono::milliseconds(offset));
        }
        while (next_step < cfg.reconfig.size() && offset >= cfg.reconfig[next_step].at_ms) {
            auto status = target.vsn()->reconfigure_to(cfg.reconfig[next_step].count);
            if (status == ReconfigStatus::Busy) {
                break;  // retried with the next tuple
            }
            if (status == ReconfigStatus::Accepted) {
                sampler.event("reconfig_start");
            }
            ++next_step;
        }
        auto t = std::make_shared<Tuple>(*input[i]);
        t->origin_ns = steady_ns();
        target.add(std::move(t), static_cast<SourceId>(i % cfg.sources));
        fed.fetch_add(1, std::memory_order_relaxed);
    }
    for (SourceId s = 0; s < cfg.sources; ++s) {
        target.close_source(s);
    }
    target.join();
    egress.join();
    if (loop) {
        loop->stop();
    }
    std::int64_t last_second = second;
    if (ticker.joinable()) {
        {
            std::lock_guard lock(tick_mutex);
            feeding = false;
        }
        tick_cv.notify_all();
        ticker.join();
        last_second = std::chrono::duration_cast<std::chrono::seconds>(clock::now() - start).count();
    }
    // The last row covers the partial second and the drain.
    sampler.sample(last_second + 1, fed.load());

    BenchSummary s;
    s.op = cfg.op;
    s.mode = cfg.mode;
    s.inputs = target.inputs();
    s.outputs = egress.count();
    s.insertions = target.insertions();
    s.instances_start = cfg.instances;
    s.instances_end = target.active();
    s.reconfig_ms = target.reconfig_ms();
    s.wall_s = std::chrono::duration<double>(clock::now() - start).count();
    std::vector<std::string> lines;
    lines.reserve(egress.tuples().size());
    for (const auto& t : egress.tuples()) {
        lines.push_back(output_line(*t));
    }
    s.digest = output_digest(std::move(lines));
    s.rows = sampler.take_rows();
    return s;
}

}  // namespace detail

inline void write_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path);
    if (!out) {
        throw ConfigError("cannot write '" + path + "'");
    }
    out << csv_header() << "\n";
    for (const auto& r : rows) {
        out << to_csv(r) << "\n";
    }
}

/// Runs the configured workload and writes the per-second CSV if a path is set.
inline BenchSummary run_benchmark(const BenchConfig& cfg) {
    cfg.validate();
    auto op = make_operator(cfg);
    auto input = make_input(cfg);
    auto summary = std::visit([&](const auto& def) { return detail::run_operator(def, cfg, input); }, op);
    if (!cfg.csv.empty()) {
        write_csv(cfg.csv, summary.rows);
    }
    return summary;
}

}  // namespace vsn
