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

#include <vsn/core.hpp>
#include <vsn/mapping.hpp>
#include <vsn/operator.hpp>
#include <vsn/scalegate.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace vsn {

inline std::int64_t steady_ns() {
    return std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

/// Elastic gate whose sources carry a queue of pending reconfigurations. Every add first turns
/// queued specs into control tuples stamped with the incoming tau, so per-source order holds.
class ControlledGate {
public:
    ControlledGate(std::size_t source_capacity, std::size_t reader_capacity, const std::vector<SourceId>& sources,
                   const std::vector<ReaderId>& readers, GateOptions opts = {})
        : gate_(source_capacity, reader_capacity, sources, readers, opts), lanes_(source_capacity) {}

    ElasticScaleGate& gate() { return gate_; }

    void add(TuplePtr t, SourceId i) {
        auto& lane = lanes_.at(i);
        if (lane.pending.load(std::memory_order_acquire)) {
            std::deque<std::shared_ptr<const ReconfigSpec>> specs;
            {
                std::lock_guard lock(lane.mutex);
                specs.swap(lane.queue);
                lane.pending.store(false, std::memory_order_release);
            }
            for (auto& s : specs) {
                gate_.add(make_control_tuple(t->tau, std::move(s)), i);
            }
        }
        gate_.add(std::move(t), i);
    }

    void advance(SourceId i, EventTime tau) { gate_.advance(i, tau); }
    void close_source(SourceId i) { gate_.close_source(i); }

    /// Queues spec on every source lane.
    void post(const std::shared_ptr<const ReconfigSpec>& spec) {
        for (auto& lane : lanes_) {
            std::lock_guard lock(lane.mutex);
            lane.queue.push_back(spec);
            lane.pending.store(true, std::memory_order_release);
        }
    }

private:
    struct Lane {
        std::mutex mutex;
        std::deque<std::shared_ptr<const ReconfigSpec>> queue;
        std::atomic<bool> pending{false};
    };

    ElasticScaleGate gate_;
    std::vector<Lane> lanes_;
};

/// Rendezvous of the instances of one epoch before they change membership.
class EpochBarrier {
public:
    void arrive_and_wait(Epoch e, std::size_t count) {
        std::unique_lock lock(mutex_);
        auto& r = rounds_[e];
        if (++r.arrived >= count) {
            cv_.notify_all();
            return;
        }
        cv_.wait(lock, [&] { return rounds_[e].arrived >= count; });
    }

    /// True for the last of count departures.
    bool depart(Epoch e, std::size_t count) {
        std::lock_guard lock(mutex_);
        if (++rounds_[e].departed == count) {
            rounds_.erase(e);
            return true;
        }
        return false;
    }

private:
    struct Round {
        std::size_t arrived = 0;
        std::size_t departed = 0;
    };
    std::mutex mutex_;
    std::condition_variable cv_;
    std::map<Epoch, Round> rounds_;
};

enum class ReconfigStatus { Accepted, Busy, Invalid };

inline const char* to_string(ReconfigStatus s) {
    switch (s) {
        case ReconfigStatus::Accepted: return "accepted";
        case ReconfigStatus::Busy: return "busy";
        case ReconfigStatus::Invalid: return "invalid";
    }
    return "?";
}

struct EngineConfig {
    /// Instances connected at start.
    std::size_t initial = 1;
    /// Instances created, connected or pooled.
    std::size_t max = 1;
    std::size_t ingress_sources = 1;
    std::size_t egress_readers = 1;
    /// Egress readers active at start, 0 for all. A chained engine needs its own initial count.
    std::size_t initial_egress_readers = 0;
    /// Flow-control bound of the input gate.
    std::uint64_t flow_bound = std::uint64_t{1} << 20;
    /// Flow-control bound of the output gate. Unbounded by default: a worker parked at the epoch
    /// barrier holds back readiness of other workers' outputs.
    std::uint64_t output_flow_bound = UINT64_MAX;
    bool check_exclusivity = false;
    /// A worker advances its output handle after this many tuples, and whenever it is idle.
    std::size_t heartbeat_every = 256;

    void validate() const {
        if (initial < 1 || initial > max) {
            throw ConfigError("need 1 <= initial (" + std::to_string(initial) + ") <= max (" + std::to_string(max) +
                              ")");
        }
        if (ingress_sources < 1 || egress_readers < 1) {
            throw ConfigError("need at least one ingress source and one egress reader");
        }
        if (initial_egress_readers > egress_readers) {
            throw ConfigError("more initial egress readers than egress readers");
        }
    }
};

struct EngineMetrics {
    std::uint64_t input_tuples = 0;
    std::uint64_t work = 0;
    std::uint64_t outputs = 0;
    std::size_t active_instances = 0;
    Epoch epoch = 0;
    double last_reconfig_ms = 0;
    std::uint64_t reconfigurations = 0;
};

/// A provisioned instance's first steps, for checking that its outputs start after the switch.
struct ActivationRecord {
    InstanceId instance = 0;
    Epoch epoch = 0;
    /// Watermark of the provisioning instance before the triggering tuple.
    EventTime bound = kMinTime;
    EventTime trigger_tau = kMinTime;
    /// kMinTime if the instance emitted nothing before being decommissioned or drained.
    EventTime first_output_tau = kMinTime;
};

/// Parallel windowed operator over a shared state: n workers, m of them connected at start.
template <class State>
class Engine {
public:
    using Inst = Instance<State>;

    Engine(OperatorDef<State> op, EngineConfig cfg) : Engine(std::move(op), cfg, nullptr) {}

    /// Chained setup: reads from an upstream engine's output gate, whose readers must match this
    /// engine's instance ids.
    Engine(OperatorDef<State> op, EngineConfig cfg, std::shared_ptr<ControlledGate> input)
        : op_(std::move(op)), cfg_(cfg), sigma_(op_.inputs) {
        cfg_.validate();
        auto members = first_instances(cfg_.initial);
        op_.mapping = op_.mapping.rebased(members);
        op_.validate();
        sigma_.enable_writer_check(cfg_.check_exclusivity);
        if (input) {
            auto& g = input->gate();
            if (g.reader_capacity() < cfg_.max) {
                throw ConfigError("upstream gate has " + std::to_string(g.reader_capacity()) + " readers, need " +
                                  std::to_string(cfg_.max));
            }
            for (std::size_t j = 0; j < cfg_.max; ++j) {
                if (g.reader_active(j) != (j < cfg_.initial)) {
                    throw ConfigError("upstream gate readers do not match the initial instances");
                }
            }
            in_ = std::move(input);
            owns_input_ = false;
        } else {
            in_ = std::make_shared<ControlledGate>(cfg_.ingress_sources, cfg_.max, first_instances(cfg_.ingress_sources),
                                                   members, GateOptions{cfg_.flow_bound});
        }
        std::vector<ReaderId> readers =
            first_instances(cfg_.initial_egress_readers == 0 ? cfg_.egress_readers : cfg_.initial_egress_readers);
        out_ = std::make_shared<ControlledGate>(cfg_.max, cfg_.egress_readers, members, readers,
                                                GateOptions{cfg_.output_flow_bound});
        inputs_ = std::vector<std::atomic<std::uint64_t>>(owns_input_ ? cfg_.ingress_sources : 0);
        committed_ = std::make_shared<ReconfigSpec>(ReconfigSpec{0, op_.mapping});
        active_members_.store(cfg_.initial);
        for (std::size_t i = 0; i < cfg_.max; ++i) {
            workers_.push_back(std::make_unique<Worker>(op_, sigma_, i, op_.mapping, i < cfg_.initial));
        }
        for (auto& w : workers_) {
            w->thread = std::thread([this, &w = *w] { run(w); });
        }
    }

    Engine(const Engine&) = delete;
    Engine& operator=(const Engine&) = delete;

    ~Engine() {
        if (owns_input_) {
            for (SourceId i = 0; i < cfg_.ingress_sources; ++i) {
                close_source(i);
            }
        }
        try {
            join();
        } catch (...) {
        }
    }

    /// Adds t from ingress source i, preceded by any queued reconfiguration.
    void add(TuplePtr t, SourceId i) {
        inputs_.at(i).fetch_add(1, std::memory_order_relaxed);
        in_->add(std::move(t), i);
    }

    void advance(SourceId i, EventTime tau) { in_->advance(i, tau); }

    void close_source(SourceId i) {
        std::lock_guard lock(close_mutex_);
        if (in_->gate().source_active(i)) {
            in_->close_source(i);
        }
    }

    void join() {
        for (auto& w : workers_) {
            if (w->thread.joinable()) {
                w->thread.join();
            }
        }
        if (failure_) {
            std::rethrow_exception(failure_);
        }
    }

    std::shared_ptr<ControlledGate> input() { return in_; }
    std::shared_ptr<ControlledGate> output() { return out_; }
    SharedState<State>& state() { return sigma_; }
    const EngineConfig& config() const { return cfg_; }

    /// Starts an epoch switch. Rejected while the previous one has not completed.
    ReconfigStatus reconfigure(ReconfigSpec spec) {
        std::lock_guard lock(reconfig_mutex_);
        if (in_flight_) {
            return ReconfigStatus::Busy;
        }
        spec.mapping.members = KeyMapping::normalize(spec.mapping.members);
        if (spec.members().empty() || spec.members().back() >= cfg_.max || spec.epoch <= issued_epoch_) {
            return ReconfigStatus::Invalid;
        }
        issued_epoch_ = spec.epoch;
        in_flight_ = true;
        reconfig_started_ns_ = steady_ns();
        in_->post(std::make_shared<const ReconfigSpec>(std::move(spec)));
        return ReconfigStatus::Accepted;
    }

    /// Switches to instances 0..count-1 under the operator's mapping mode.
    ReconfigStatus reconfigure_to(std::size_t count) {
        Epoch next;
        {
            std::lock_guard lock(reconfig_mutex_);
            next = issued_epoch_ + 1;
        }
        if (count < 1 || count > cfg_.max) {
            return ReconfigStatus::Invalid;
        }
        return reconfigure(ReconfigSpec{next, op_.mapping.rebased(first_instances(count))});
    }

    /// Duration (ms) of every completed epoch switch, from request to the last instance leaving it.
    std::vector<double> reconfig_durations() const {
        std::lock_guard lock(reconfig_mutex_);
        return durations_;
    }

    bool reconfig_in_flight() const {
        std::lock_guard lock(reconfig_mutex_);
        return in_flight_;
    }

    /// Waits until no reconfiguration is in flight.
    bool wait_reconfig(std::chrono::milliseconds timeout) {
        std::unique_lock lock(reconfig_mutex_);
        return reconfig_cv_.wait_for(lock, timeout, [&] { return !in_flight_; });
    }

    /// Current committed epoch and mapping.
    std::shared_ptr<const ReconfigSpec> committed() const {
        std::lock_guard lock(reconfig_mutex_);
        return committed_;
    }

    EngineMetrics metrics() const {
        EngineMetrics m;
        for (const auto& in : inputs_) {
            m.input_tuples += in.load(std::memory_order_relaxed);
        }
        for (const auto& w : workers_) {
            m.work += w->inst.work();
            m.outputs += w->outputs.load(std::memory_order_relaxed);
        }
        std::lock_guard lock(reconfig_mutex_);
        m.active_instances = committed_->members().size();
        m.epoch = committed_->epoch;
        m.last_reconfig_ms = last_reconfig_ms_;
        m.reconfigurations = reconfigurations_;
        return m;
    }

    /// Busy fraction of each committed instance since the previous call.
    std::vector<double> sample_loads() {
        auto now = steady_ns();
        auto members = committed()->members();
        std::vector<double> loads;
        for (InstanceId id : members) {
            auto& w = *workers_[id];
            auto busy = w.busy_ns.load(std::memory_order_relaxed);
            double elapsed = static_cast<double>(now - w.sampled_at);
            double frac = elapsed > 0 ? static_cast<double>(busy - w.sampled_busy) / elapsed : 0.0;
            loads.push_back(std::clamp(frac, 0.0, 1.0));
            w.sampled_at = now;
            w.sampled_busy = busy;
        }
        return loads;
    }

    // Introspection, valid after join() or for counters that tolerate staleness.

    std::size_t worker_count() const { return workers_.size(); }
    const Inst& instance(InstanceId id) const { return workers_.at(id)->inst; }
    /// Epochs each worker took part in, in order.
    const std::vector<Epoch>& epoch_log(InstanceId id) const { return workers_.at(id)->epochs; }
    const std::vector<ActivationRecord>& activations(InstanceId id) const { return workers_.at(id)->activations; }
    std::uint64_t writer_violations() const { return sigma_.writer_violations(); }

    std::uint64_t order_violations() const {
        std::uint64_t n = 0;
        for (const auto& w : workers_) {
            n += w->inst.order_violations();
        }
        return n;
    }

    std::uint64_t causality_violations() const {
        std::uint64_t n = 0;
        for (const auto& w : workers_) {
            n += w->inst.causality_violations();
        }
        return n;
    }

private:
    struct Activation {
        std::shared_ptr<const ReconfigSpec> target;
        EventTime bound = kMinTime;
        TuplePtr trigger;
    };

    struct Worker {
        Worker(const OperatorDef<State>& op, SharedState<State>& sigma, InstanceId id, const KeyMapping& mapping,
               bool member)
            : id(id), inst(op, sigma, id, mapping), member(member) {
            if (member) {
                epochs.push_back(0);
            }
            sampled_at = steady_ns();
        }

        InstanceId id;
        Inst inst;
        bool member;
        std::thread thread;

        std::atomic<bool> activated{false};
        Activation activation;

        // Set by the hooks around process_vsn.
        TuplePtr current;
        EventTime bound = kMinTime;
        std::size_t pending_count = 0;
        Epoch pending_epoch = 0;

        EventTime last_heartbeat = kMinTime;
        bool awaiting_first = false;

        std::atomic<std::int64_t> busy_ns{0};
        std::atomic<std::uint64_t> outputs{0};
        std::int64_t sampled_at = 0;
        std::int64_t sampled_busy = 0;

        std::vector<Epoch> epochs;
        std::vector<ActivationRecord> activations;
    };

    struct Hooks {
        Engine& e;
        Worker& w;

        void before_barrier(Inst& inst, EventTime previous) {
            w.bound = previous;
            e.out_->advance(w.id, std::max(previous, inst.last_output_tau()));
        }

        void wait_for_instances(Epoch epoch, std::size_t count) {
            w.pending_count = count;
            w.pending_epoch = epoch;
            e.barrier_.arrive_and_wait(epoch, count);
        }

        bool add_sources(const std::vector<InstanceId>& added, InstanceId caller) {
            // The gate only turns away overlapping callers; a late one could re-add a source whose
            // instance already finished, so each epoch is claimed once here.
            if (!claim(e.provisioned_, w.pending_epoch)) {
                return false;
            }
            return e.out_->gate().add_sources(added, caller);
        }

        void add_readers(const std::vector<InstanceId>& added, Inst& inst) {
            if (!e.in_->gate().add_readers(added, inst.id())) {
                return;
            }
            for (InstanceId id : added) {
                auto& n = *e.workers_[id];
                n.activation = Activation{std::make_shared<ReconfigSpec>(*inst.activation_target()), w.bound,
                                          w.current};
                e.active_members_.fetch_add(1);
                n.activated.store(true);
            }
        }

        bool remove_readers(const std::vector<InstanceId>& removed) {
            if (!claim(e.decommissioned_, w.pending_epoch)) {
                return false;
            }
            return e.in_->gate().remove_readers(removed);
        }
        void remove_sources(const std::vector<InstanceId>& removed) { e.out_->gate().remove_sources(removed); }

        static bool claim(std::atomic<Epoch>& last, Epoch epoch) {
            Epoch cur = last.load();
            while (cur < epoch) {
                if (last.compare_exchange_weak(cur, epoch)) {
                    return true;
                }
            }
            return false;
        }

        void switched(Inst& inst) {
            w.epochs.push_back(inst.epoch());
            e.note_switched(inst, w.pending_count);
        }
    };

    void note_switched(const Inst& inst, std::size_t count) {
        if (!barrier_.depart(inst.epoch(), count)) {
            return;
        }
        std::lock_guard lock(reconfig_mutex_);
        committed_ = std::make_shared<ReconfigSpec>(ReconfigSpec{inst.epoch(), inst.mapping()});
        last_reconfig_ms_ = static_cast<double>(steady_ns() - reconfig_started_ns_) / 1e6;
        durations_.push_back(last_reconfig_ms_);
        ++reconfigurations_;
        if (inst.epoch() >= issued_epoch_) {
            in_flight_ = false;
        }
        reconfig_cv_.notify_all();
    }

    void run(Worker& w) {
        try {
            loop(w);
        } catch (...) {
            std::lock_guard lock(close_mutex_);
            if (!failure_) {
                failure_ = std::current_exception();
            }
            // Let the others finish so join() returns.
            active_members_.store(0);
        }
    }

    void loop(Worker& w) {
        Hooks hooks{*this, w};
        auto sink = [&](TuplePtr t) {
            if (w.awaiting_first) {
                w.activations.back().first_output_tau = t->tau;
                w.awaiting_first = false;
            }
            w.outputs.fetch_add(1, std::memory_order_relaxed);
            out_->add(std::move(t), w.id);
        };
        auto process = [&](const TuplePtr& t) {
            auto start = steady_ns();
            w.current = t;
            w.inst.process_vsn(t, hooks, sink);
            w.current.reset();
            w.busy_ns.fetch_add(steady_ns() - start, std::memory_order_relaxed);
        };
        auto heartbeat = [&] {
            EventTime hb = std::max(w.inst.watermark(), w.inst.last_output_tau());
            if (hb > w.last_heartbeat) {
                out_->advance(w.id, hb);
                w.last_heartbeat = hb;
            }
        };

        for (;;) {
            if (!w.member) {
                if (!wait_for_activation(w)) {
                    return;
                }
                auto act = std::move(w.activation);
                w.inst.adopt(act.target->epoch, act.target->mapping, act.bound);
                w.epochs.push_back(act.target->epoch);
                w.activations.push_back(ActivationRecord{w.id, act.target->epoch, act.bound, act.trigger->tau});
                w.awaiting_first = true;
                w.last_heartbeat = kMinTime;
                w.member = true;
                process(act.trigger);
            }
            Backoff backoff;
            std::size_t since_heartbeat = 0;
            while (w.member) {
                if (!w.inst.member()) {
                    w.member = false;
                    w.awaiting_first = false;
                    active_members_.fetch_sub(1);
                    break;
                }
                auto t = in_->gate().get(w.id);
                if (!t) {
                    if (in_->gate().drained(w.id)) {
                        w.inst.flush(w.inst.watermark(), sink);
                        out_->close_source(w.id);
                        active_members_.fetch_sub(1);
                        return;
                    }
                    heartbeat();
                    backoff.pause();
                    continue;
                }
                backoff.reset();
                process(t);
                if (++since_heartbeat >= cfg_.heartbeat_every && w.inst.member()) {
                    since_heartbeat = 0;
                    heartbeat();
                }
            }
        }
    }

    /// Pooled wait. False once no connected instance is left to activate this one.
    bool wait_for_activation(Worker& w) {
        Backoff backoff;
        for (;;) {
            if (w.activated.load()) {
                w.activated.store(false);
                return true;
            }
            if (active_members_.load() == 0) {
                // An activation always happens before its activator leaves, so look once more.
                if (w.activated.load()) {
                    continue;
                }
                return false;
            }
            backoff.pause();
        }
    }

    OperatorDef<State> op_;
    EngineConfig cfg_;
    SharedState<State> sigma_;
    std::shared_ptr<ControlledGate> in_;
    std::shared_ptr<ControlledGate> out_;
    bool owns_input_ = true;
    std::vector<std::atomic<std::uint64_t>> inputs_;
    std::vector<std::unique_ptr<Worker>> workers_;
    std::atomic<std::size_t> active_members_{0};
    EpochBarrier barrier_;
    std::atomic<Epoch> provisioned_{0};
    std::atomic<Epoch> decommissioned_{0};

    mutable std::mutex reconfig_mutex_;
    std::condition_variable reconfig_cv_;
    bool in_flight_ = false;
    Epoch issued_epoch_ = 0;
    std::int64_t reconfig_started_ns_ = 0;
    double last_reconfig_ms_ = 0;
    std::uint64_t reconfigurations_ = 0;
    std::vector<double> durations_;
    std::shared_ptr<const ReconfigSpec> committed_;

    std::mutex close_mutex_;
    std::exception_ptr failure_;
};

struct SnConfig {
    std::size_t instances = 1;
    std::size_t ingress_sources = 1;
    std::size_t egress_readers = 1;
    std::uint64_t flow_bound = std::uint64_t{1} << 20;
    std::size_t heartbeat_every = 256;
};

/// Shared-nothing parallel operator: each instance keeps private state and merges its own copy
/// of the input, so a tuple is sent to every instance owning one of its keys.
template <class State>
class SnEngine {
public:
    SnEngine(OperatorDef<State> op, SnConfig cfg) : op_(std::move(op)), cfg_(cfg) {
        if (cfg_.instances < 1 || cfg_.ingress_sources < 1 || cfg_.egress_readers < 1) {
            throw ConfigError("need at least one instance, ingress source and egress reader");
        }
        op_.mapping = op_.mapping.rebased(first_instances(cfg_.instances));
        op_.validate();
        out_ = std::make_unique<ScaleGate>(cfg_.instances, cfg_.egress_readers, GateOptions{UINT64_MAX});
        for (std::size_t j = 0; j < cfg_.instances; ++j) {
            auto w = std::make_unique<Worker>(op_, j, cfg_);
            workers_.push_back(std::move(w));
        }
        max_tau_.resize(cfg_.ingress_sources, kMinTime);
        for (auto& w : workers_) {
            w->thread = std::thread([this, &w = *w] { run(w); });
        }
    }

    SnEngine(const SnEngine&) = delete;
    SnEngine& operator=(const SnEngine&) = delete;

    ~SnEngine() {
        for (SourceId i = 0; i < cfg_.ingress_sources; ++i) {
            close_source(i);
        }
        try {
            join();
        } catch (...) {
        }
    }

    /// Forwards t from source i to every instance owning one of its keys, and advances the others.
    void add(TuplePtr t, SourceId i) {
        thread_local std::vector<char> peers;
        peers.assign(workers_.size(), 0);
        for (const auto& k : op_.keys(*t)) {
            peers[op_.mapping(k)] = true;
        }
        max_tau_[i] = std::max(max_tau_[i], t->tau);
        ingress_.fetch_add(1, std::memory_order_relaxed);
        for (std::size_t j = 0; j < workers_.size(); ++j) {
            if (peers[j]) {
                copies_.fetch_add(1, std::memory_order_relaxed);
                workers_[j]->in.add(t, i);
            } else {
                workers_[j]->in.advance(i, t->tau);
            }
        }
    }

    void advance(SourceId i, EventTime tau) {
        for (auto& w : workers_) {
            w->in.advance(i, tau);
        }
    }

    void close_source(SourceId i) {
        std::lock_guard lock(close_mutex_);
        for (auto& w : workers_) {
            w->in.close_source(i);
        }
    }

    void join() {
        for (auto& w : workers_) {
            if (w->thread.joinable()) {
                w->thread.join();
            }
        }
        if (failure_) {
            std::rethrow_exception(failure_);
        }
    }

    ScaleGate& output() { return *out_; }

    /// Tuple copies enqueued to instances.
    std::uint64_t copies() const { return copies_.load(std::memory_order_relaxed); }
    std::uint64_t input_tuples() const { return ingress_.load(std::memory_order_relaxed); }
    std::uint64_t insertions() const {
        std::uint64_t n = 0;
        for (const auto& w : workers_) {
            n += w->in.insertions();
        }
        return n;
    }
    std::uint64_t work() const {
        std::uint64_t n = 0;
        for (const auto& w : workers_) {
            n += w->inst.work();
        }
        return n;
    }
    std::uint64_t outputs() const {
        std::uint64_t n = 0;
        for (const auto& w : workers_) {
            n += w->inst.outputs();
        }
        return n;
    }
    const Instance<State>& instance(InstanceId id) const { return workers_.at(id)->inst; }

private:
    struct Worker {
        Worker(const OperatorDef<State>& op, InstanceId id, const SnConfig& cfg)
            : in(cfg.ingress_sources, 1, GateOptions{cfg.flow_bound}), sigma(op.inputs), inst(op, sigma, id, op.mapping) {}

        ScaleGate in;
        SharedState<State> sigma;
        Instance<State> inst;
        std::thread thread;
    };

    void run(Worker& w) {
        try {
            loop(w);
        } catch (...) {
            std::lock_guard lock(close_mutex_);
            if (!failure_) {
                failure_ = std::current_exception();
            }
        }
    }

    void loop(Worker& w) {
        auto id = static_cast<SourceId>(w.inst.id());
        auto sink = [&](TuplePtr t) { out_->add(std::move(t), id); };
        EventTime last_heartbeat = kMinTime;
        auto heartbeat = [&] {
            EventTime hb = std::max(w.inst.watermark(), w.inst.last_output_tau());
            if (hb > last_heartbeat) {
                out_->advance(id, hb);
                last_heartbeat = hb;
            }
        };
        Backoff backoff;
        std::size_t since_heartbeat = 0;
        for (;;) {
            auto t = w.in.get(0);
            if (!t) {
                if (w.in.drained(0)) {
                    break;
                }
                heartbeat();
                backoff.pause();
                continue;
            }
            backoff.reset();
            w.inst.process_sn(t, sink);
            if (++since_heartbeat >= cfg_.heartbeat_every) {
                since_heartbeat = 0;
                heartbeat();
            }
        }
        // Sources are all closed, so the ingress maxima are final.
        EventTime last = kMinTime;
        for (EventTime m : max_tau_) {
            last = std::max(last, m);
        }
        w.inst.flush(std::max<EventTime>(last, 0), sink);
        out_->close_source(id);
    }

    OperatorDef<State> op_;
    SnConfig cfg_;
    std::unique_ptr<ScaleGate> out_;
    std::vector<std::unique_ptr<Worker>> workers_;
    std::vector<EventTime> max_tau_;
    std::atomic<std::uint64_t> copies_{0};
    std::atomic<std::uint64_t> ingress_{0};
    std::mutex close_mutex_;
    std::exception_ptr failure_;
};

/// Drains one reader of an output gate on its own thread.
class Egress {
public:
    using Callback = std::function<void(const TuplePtr&)>;

    Egress(ScaleGate& gate, ReaderId reader, Callback on_tuple = {}, bool keep = true)
        : gate_(gate), reader_(reader), on_tuple_(std::move(on_tuple)), keep_(keep) {
        thread_ = std::thread([this] { run(); });
    }

    Egress(const Egress&) = delete;
    Egress& operator=(const Egress&) = delete;

    ~Egress() { join(); }

    void join() {
        if (thread_.joinable()) {
            thread_.join();
        }
    }

    /// Valid after join().
    const std::vector<TuplePtr>& tuples() const { return tuples_; }
    std::uint64_t count() const { return count_.load(std::memory_order_relaxed); }
    /// Emissions that went backwards in tau.
    std::uint64_t order_violations() const { return order_violations_; }

    /// Latency samples (ms) recorded since the previous call.
    std::vector<double> take_latencies() {
        std::lock_guard lock(mutex_);
        std::vector<double> out;
        out.swap(latencies_);
        return out;
    }

private:
    void run() {
        Backoff backoff;
        EventTime last = kMinTime;
        while (!gate_.drained(reader_)) {
            auto t = gate_.get(reader_);
            if (!t) {
                backoff.pause();
                continue;
            }
            backoff.reset();
            if (t->tau < last) {
                ++order_violations_;
            }
            last = t->tau;
            if (t->origin_ns > 0) {
                double ms = static_cast<double>(steady_ns() - t->origin_ns) / 1e6;
                std::lock_guard lock(mutex_);
                latencies_.push_back(ms);
            }
            count_.fetch_add(1, std::memory_order_relaxed);
            if (on_tuple_) {
                on_tuple_(t);
            }
            if (keep_) {
                tuples_.push_back(std::move(t));
            }
        }
    }

    ScaleGate& gate_;
    ReaderId reader_;
    Callback on_tuple_;
    bool keep_;
    std::thread thread_;
    std::vector<TuplePtr> tuples_;
    std::atomic<std::uint64_t> count_{0};
    std::uint64_t order_violations_ = 0;
    std::mutex mutex_;
    std::vector<double> latencies_;
};

struct Thresholds {
    double upper = 0.90;
    double target = 0.70;
    double lower = 0.45;
};

/// Decides an instance count from per-instance loads.
class Controller {
public:
    virtual ~Controller() = default;
    virtual std::optional<std::size_t> decide(const std::vector<double>& loads, std::size_t max) = 0;
};

/// Scales out above the upper threshold and in below the lower one, to the smallest count whose
/// projected average load stays at or under the target.
class ThresholdController : public Controller {
public:
    explicit ThresholdController(Thresholds t = {}) : t_(t) {
        if (!(t_.lower < t_.target && t_.target < t_.upper) || t_.lower < 0 || t_.upper > 1) {
            throw ConfigError("thresholds must satisfy 0 <= lower < target < upper <= 1");
        }
    }

    std::optional<std::size_t> decide(const std::vector<double>& loads, std::size_t max) override {
        if (loads.empty()) {
            return std::nullopt;
        }
        double n = static_cast<double>(loads.size());
        double avg = 0;
        for (double l : loads) {
            avg += l;
        }
        avg /= n;
        // Averaging equal loads can land a hair off a threshold; treat that as on it.
        constexpr double eps = 1e-9;
        bool high = avg > t_.upper + eps;
        bool low = avg < t_.lower - eps;
        if (!high && !low) {
            return std::nullopt;
        }
        auto wanted = static_cast<std::size_t>(std::ceil(n * avg / t_.target - eps));
        wanted = std::clamp<std::size_t>(wanted, 1, std::max<std::size_t>(max, 1));
        if (wanted == loads.size()) {
            return std::nullopt;
        }
        if (high && wanted < loads.size()) {
            return std::nullopt;
        }
        if (low && wanted > loads.size()) {
            return std::nullopt;
        }
        return wanted;
    }

    const Thresholds& thresholds() const { return t_; }

private:
    Thresholds t_;
};

/// Periodically samples an engine's loads and applies the controller's decisions.
template <class EngineT>
class ControlLoop {
public:
    ControlLoop(EngineT& engine, Controller& controller, std::chrono::milliseconds period,
                std::function<void(std::size_t from, std::size_t to)> on_decision = {})
        : engine_(engine), controller_(controller), period_(period), on_decision_(std::move(on_decision)) {
        thread_ = std::thread([this] { run(); });
    }

    ~ControlLoop() { stop(); }

    void stop() {
        {
            std::lock_guard lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        if (thread_.joinable()) {
            thread_.join();
        }
    }

private:
    void run() {
        std::unique_lock lock(mutex_);
        engine_.sample_loads();
        while (!cv_.wait_for(lock, period_, [&] { return stop_; })) {
            auto loads = engine_.sample_loads();
            if (engine_.reconfig_in_flight()) {
                continue;
            }
            if (auto n = controller_.decide(loads, engine_.config().max)) {
                if (engine_.reconfigure_to(*n) == ReconfigStatus::Accepted && on_decision_) {
                    on_decision_(loads.size(), *n);
                }
            }
        }
    }

    EngineT& engine_;
    Controller& controller_;
    std::chrono::milliseconds period_;
    std::function<void(std::size_t, std::size_t)> on_decision_;
    std::mutex mutex_;
    std::condition_variable cv_;
    bool stop_ = false;
    std::thread thread_;
};

}  // namespace vsn
