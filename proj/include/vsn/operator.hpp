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

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <vector>

namespace vsn {

template <class State>
struct UpdateResult {
    std::vector<State> states;
    std::vector<Payload> outputs;
    /// Operator-defined work units (e.g. comparisons), summed into throughput metrics.
    std::uint64_t work = 0;
};

/// Window state that keeps raw tuples; used when an operator relies on the default functions.
struct TupleStore {
    std::deque<TuplePtr> tuples;
};

/// Parameter bundle of a generalized windowed operator.
template <class State>
struct OperatorDef {
    std::string name;
    WindowSpec window;
    /// Number of logical input streams; each window slot holds one state per input.
    std::size_t inputs = 1;
    /// Keys a tuple contributes to.
    std::function<KeySet(const Tuple&)> keys;
    /// Initial key-to-instance mapping; its member list is replaced by the engine.
    KeyMapping mapping = KeyMapping::hash_mod({0});
    Schema out_schema;
    /// (states of the slot, key, slot left boundary, tuple) -> new states and payloads.
    std::function<UpdateResult<State>(std::vector<State>&&, const Key&, EventTime, const Tuple&)> update;
    /// Payloads for an expiring slot.
    std::function<std::vector<Payload>(const std::vector<State>&, const Key&, EventTime)> output;
    /// Single windows only: states carried into the next instance, which starts at the given boundary.
    std::function<std::vector<State>(std::vector<State>&&, const Key&, EventTime)> slide;
    std::function<bool(const State&)> is_empty;

    bool single() const { return window.type == WindowType::Single; }

    void validate() const {
        window.validate();
        if (inputs == 0) {
            throw ConfigError(name + ": at least one input stream required");
        }
        if (!keys) {
            throw ConfigError(name + ": missing key function");
        }
        if (!update) {
            throw ConfigError(name + ": missing update function");
        }
        if (mapping.members.empty()) {
            throw ConfigError(name + ": mapping has no members");
        }
    }
};

/// Fills the default update/slide/emptiness functions for tuple-storing operators.
inline OperatorDef<TupleStore> with_defaults(OperatorDef<TupleStore> op) {
    if (!op.update) {
        op.update = [](std::vector<TupleStore>&& states, const Key&, EventTime, const Tuple& t) {
            UpdateResult<TupleStore> r;
            auto copy = std::make_shared<Tuple>(t);
            states.at(t.stream).tuples.push_back(std::move(copy));
            r.states = std::move(states);
            return r;
        };
    }
    if (!op.slide) {
        op.slide = [](std::vector<TupleStore>&& states, const Key&, EventTime new_left) {
            for (auto& s : states) {
                while (!s.tuples.empty() && s.tuples.front()->tau < new_left) {
                    s.tuples.pop_front();
                }
            }
            return std::move(states);
        };
    }
    if (!op.is_empty) {
        op.is_empty = [](const TupleStore& s) { return s.tuples.empty(); };
    }
    return op;
}

/// The set of window states sharing one left boundary for a key.
template <class State>
struct Slot {
    EventTime l = 0;
    std::vector<State> states;
    /// Largest input tau folded into this slot.
    EventTime source_tau = kMinTime;
    /// Latest arrival stamp among contributing inputs.
    std::int64_t origin_ns = 0;
};

template <class State>
struct KeyEntry {
    explicit KeyEntry(Key k) : key(std::move(k)) {}

    Key key;
    std::deque<Slot<State>> slots;
    /// Position in the owning instance's expiry index.
    EventTime indexed_l = kMinTime;
    /// Instance currently mutating this key, -1 if none. Written only when checks are enabled.
    std::atomic<long> writer{-1};
};

/// Window state shared by all instances of an operator, sharded by key hash.
template <class State>
class SharedState {
public:
    using Entry = KeyEntry<State>;

    explicit SharedState(std::size_t inputs, std::size_t shards = 64) : inputs_(inputs), shards_(shards) {}

    SharedState(const SharedState&) = delete;
    SharedState& operator=(const SharedState&) = delete;

    std::size_t inputs() const { return inputs_; }

    Entry* find(const Key& k) {
        auto& sh = shard(k);
        std::lock_guard lock(sh.mutex);
        auto it = sh.map.find(k);
        return it == sh.map.end() ? nullptr : it->second.get();
    }

    Entry& find_or_create(const Key& k) {
        auto& sh = shard(k);
        std::lock_guard lock(sh.mutex);
        auto& slot = sh.map[k];
        if (!slot) {
            slot = std::make_unique<Entry>(k);
        }
        return *slot;
    }

    void erase(const Key& k) {
        auto& sh = shard(k);
        std::lock_guard lock(sh.mutex);
        sh.map.erase(k);
    }

    /// Visits every entry with its shard locked.
    template <class F>
    void for_each(F&& f) {
        for (auto& sh : shards_) {
            std::lock_guard lock(sh.mutex);
            for (auto& [k, e] : sh.map) {
                f(*e);
            }
        }
    }

    std::size_t key_count() {
        std::size_t n = 0;
        for (auto& sh : shards_) {
            std::lock_guard lock(sh.mutex);
            n += sh.map.size();
        }
        return n;
    }

    /// Slot with left boundary l, created with default states if absent.
    Slot<State>& check_and_create(Entry& e, EventTime l) {
        auto it = e.slots.end();
        while (it != e.slots.begin() && std::prev(it)->l > l) {
            --it;
        }
        if (it != e.slots.begin() && std::prev(it)->l == l) {
            return *std::prev(it);
        }
        Slot<State> s;
        s.l = l;
        s.states.resize(inputs_);
        return *e.slots.insert(it, std::move(s));
    }

    void set(Slot<State>& s, std::vector<State>&& states) {
        if (states.size() != inputs_) {
            throw ConfigError("update returned " + std::to_string(states.size()) + " states, expected " +
                              std::to_string(inputs_));
        }
        s.states = std::move(states);
    }

    void remove_first(Entry& e) { e.slots.pop_front(); }

    void shift_first(Entry& e, std::vector<State>&& states, Duration by) {
        auto& s = e.slots.front();
        set(s, std::move(states));
        s.l += by;
    }

    /// Writes a slot directly; used to start from a known state.
    void seed(const Key& k, EventTime l, std::vector<State> states) {
        auto& e = find_or_create(k);
        auto& s = check_and_create(e, l);
        set(s, std::move(states));
    }

    /// Flattened copy of every window instance, for inspection when no writer is running.
    std::vector<std::pair<WindowInstance<State>, std::size_t>> snapshot() {
        std::vector<std::pair<WindowInstance<State>, std::size_t>> out;
        for_each([&](Entry& e) {
            for (const auto& s : e.slots) {
                for (std::size_t i = 0; i < s.states.size(); ++i) {
                    out.push_back({WindowInstance<State>{s.states[i], s.l, e.key}, i});
                }
            }
        });
        return out;
    }

    void enable_writer_check(bool on) { check_writers_ = on; }
    bool writer_check_enabled() const { return check_writers_; }
    std::uint64_t writer_violations() const { return violations_.load(std::memory_order_relaxed); }
    void note_violation() { violations_.fetch_add(1, std::memory_order_relaxed); }

private:
    struct Shard {
        std::mutex mutex;
        std::unordered_map<Key, std::unique_ptr<Entry>, KeyHash> map;
    };

    Shard& shard(const Key& k) { return shards_[(k.hash() >> 7) % shards_.size()]; }

    std::size_t inputs_;
    std::vector<Shard> shards_;
    bool check_writers_ = false;
    std::atomic<std::uint64_t> violations_{0};
};

/// Marks an instance as the current writer of a key for the duration of a mutation.
template <class State>
class WriterGuard {
public:
    WriterGuard(SharedState<State>& sigma, KeyEntry<State>& e, InstanceId id) : sigma_(sigma), e_(e) {
        if (!sigma.writer_check_enabled()) {
            return;
        }
        long expected = -1;
        if (e.writer.compare_exchange_strong(expected, static_cast<long>(id), std::memory_order_acq_rel)) {
            owned_ = true;
        } else {
            sigma.note_violation();
        }
    }
    ~WriterGuard() {
        if (owned_) {
            e_.writer.store(-1, std::memory_order_release);
        }
    }
    WriterGuard(const WriterGuard&) = delete;
    WriterGuard& operator=(const WriterGuard&) = delete;

private:
    SharedState<State>& sigma_;
    KeyEntry<State>& e_;
    bool owned_ = false;
};

/// Hooks used by an instance during an epoch switch. The default does nothing, which suits a
/// lone instance.
template <class Inst>
struct NoReconfigHooks {
    void before_barrier(Inst&, EventTime) {}
    void wait_for_instances(Epoch, std::size_t) {}
    bool add_sources(const std::vector<InstanceId>&, InstanceId) { return false; }
    void add_readers(const std::vector<InstanceId>&, Inst&) {}
    bool remove_readers(const std::vector<InstanceId>&) { return false; }
    void remove_sources(const std::vector<InstanceId>&) {}
    void switched(Inst&) {}
};

/// One operator instance: watermark, expiry bookkeeping and epoch variables over a state store.
template <class State>
class Instance {
public:
    using Entry = KeyEntry<State>;

    Instance(const OperatorDef<State>& op, SharedState<State>& sigma, InstanceId id, KeyMapping mapping,
             Epoch epoch = 0)
        : op_(op), sigma_(sigma), id_(id), mapping_(std::move(mapping)), epoch_(epoch) {}

    InstanceId id() const { return id_; }
    EventTime watermark() const { return watermark_; }
    EventTime rho() const { return rho_; }
    Epoch epoch() const { return epoch_; }
    EventTime gamma() const { return gamma_; }
    const KeyMapping& mapping() const { return mapping_; }
    bool member() const { return mapping_.contains(id_); }
    bool reconfig_pending() const { return next_ != nullptr; }
    const ReconfigSpec* pending() const { return next_.get(); }
    EventTime last_output_tau() const { return last_out_; }

    std::uint64_t work() const { return work_.load(std::memory_order_relaxed); }
    std::uint64_t outputs() const { return outputs_; }
    /// Emissions whose tau went backwards relative to this instance's previous emission.
    std::uint64_t order_violations() const { return order_violations_; }
    /// Emissions whose tau did not exceed every contributing input tau.
    std::uint64_t causality_violations() const { return causality_violations_; }

    void set_watermark(EventTime w) { watermark_ = w; }

    /// Takes over a new epoch context, as done for instances activated from the pool.
    void adopt(Epoch epoch, KeyMapping mapping, EventTime watermark) {
        epoch_ = epoch;
        mapping_ = std::move(mapping);
        next_.reset();
        gamma_ = kMaxTime;
        watermark_ = std::max(watermark_, watermark);
        // A fresh output source starts here, so ordering is tracked from this point on.
        last_out_ = watermark;
        rebuild_index();
    }

    /// Recomputes the expiry index and rho from the slots of owned keys.
    void rebuild_index() {
        index_.clear();
        EventTime lowest = kMaxTime;
        sigma_.for_each([&](Entry& e) {
            // Ownership first: slots of keys owned elsewhere may be changing underneath.
            if (mapping_(e.key) != id_ || e.slots.empty()) {
                return;
            }
            e.indexed_l = e.slots.front().l;
            index_.insert({e.indexed_l, &e});
            lowest = std::min(lowest, e.indexed_l);
        });
        rho_ = lowest == kMaxTime ? std::max<EventTime>(rho_, 0) : lowest;
    }

    /// Shared-nothing processing of one tuple delivered in timestamp order.
    template <class Sink>
    void process_sn(const TuplePtr& t, Sink&& sink) {
        if (t->kind != TupleKind::Regular) {
            return;
        }
        watermark_ = std::max(watermark_, t->tau);
        expire(sink);
        handle_input(*t, sink);
    }

    /// Shared-state processing of one tuple from the shared input buffer.
    template <class Hooks, class Sink>
    void process_vsn(const TuplePtr& t, Hooks& hooks, Sink&& sink) {
        if (t->kind == TupleKind::Control) {
            prepare_reconfig(*t);
            return;
        }
        if (t->kind != TupleKind::Regular) {
            return;
        }
        EventTime previous = watermark_;
        watermark_ = std::max(watermark_, t->tau);
        if (watermark_ > previous && watermark_ > gamma_) {
            switch_epoch(previous, hooks);
        }
        expire(sink);
        handle_input(*t, sink);
    }

    /// Records the target of a control tuple if it is newer than the current epoch and not older
    /// than an already pending one.
    void prepare_reconfig(const Tuple& t) {
        if (!t.control || t.control->epoch <= epoch_) {
            return;
        }
        if (next_ && t.control->epoch < next_->epoch) {
            return;
        }
        next_ = t.control;
        gamma_ = t.tau;
    }

    /// End of stream: emits every window that contained input up to final_watermark and drops
    /// the remaining owned slots.
    template <class Sink>
    void flush(EventTime final_watermark, Sink&& sink) {
        EventTime last = std::max(watermark_, final_watermark);
        watermark_ = last + op_.window.size + 1;
        expire(sink);
        for (auto& [l, e] : index_) {
            e->indexed_l = kMinTime;
            sigma_.erase(e->key);
        }
        index_.clear();
        watermark_ = last;
    }

private:
    struct IndexOrder {
        bool operator()(const std::pair<EventTime, Entry*>& a, const std::pair<EventTime, Entry*>& b) const {
            if (a.first != b.first) {
                return a.first < b.first;
            }
            if (a.second->key.hash() != b.second->key.hash()) {
                return a.second->key.hash() < b.second->key.hash();
            }
            return a.second->key.bytes() < b.second->key.bytes();
        }
    };

    template <class Hooks>
    void switch_epoch(EventTime previous, Hooks& hooks) {
        auto target = next_;
        hooks.before_barrier(*this, previous);
        hooks.wait_for_instances(target->epoch, mapping_.members.size());
        const auto& now = mapping_.members;
        const auto& next = target->members();
        std::vector<InstanceId> added;
        std::vector<InstanceId> removed;
        std::set_difference(next.begin(), next.end(), now.begin(), now.end(), std::back_inserter(added));
        std::set_difference(now.begin(), now.end(), next.begin(), next.end(), std::back_inserter(removed));
        if (!added.empty() && hooks.add_sources(added, id_)) {
            pending_activation_ = target;
            hooks.add_readers(added, *this);
            pending_activation_.reset();
        }
        if (!removed.empty() && hooks.remove_readers(removed)) {
            hooks.remove_sources(removed);
        }
        epoch_ = target->epoch;
        mapping_ = target->mapping;
        next_.reset();
        gamma_ = kMaxTime;
        rebuild_index();
        hooks.switched(*this);
    }

public:
    /// Spec being provisioned by this instance, valid inside add_readers.
    const ReconfigSpec* activation_target() const { return pending_activation_.get(); }

private:
    template <class Sink>
    void expire(Sink& sink) {
        const Duration ws = op_.window.size;
        while (!index_.empty()) {
            auto it = index_.begin();
            auto [l, e] = *it;
            if (!(l + ws < watermark_)) {
                break;
            }
            index_.erase(it);
            e->indexed_l = kMinTime;
            {
                WriterGuard<State> guard(sigma_, *e, id_);
                forward_and_shift(*e, sink);
                // Without output there is nothing to interleave with other keys, so catch up now.
                if (!op_.output && op_.single()) {
                    catch_up(*e, watermark_ - ws, sink);
                }
            }
            settle(*e);
        }
        if (rho_ + ws < watermark_) {
            EventTime steps = (watermark_ - ws - rho_ + op_.window.advance - 1) / op_.window.advance;
            rho_ += steps * op_.window.advance;
        }
    }

    template <class Sink>
    void forward_and_shift(Entry& e, Sink& sink) {
        auto& s = e.slots.front();
        if (op_.output) {
            emit(op_.output(s.states, e.key, s.l), s, sink);
        }
        if (!op_.single()) {
            sigma_.remove_first(e);
            return;
        }
        EventTime next_l = s.l + op_.window.advance;
        std::vector<State> states = op_.slide ? op_.slide(std::move(s.states), e.key, next_l) : std::move(s.states);
        if (all_empty(states)) {
            sigma_.remove_first(e);
        } else {
            sigma_.shift_first(e, std::move(states), op_.window.advance);
        }
    }

    /// Single windows: shifts the slot until its left boundary reaches limit or it empties.
    template <class Sink>
    void catch_up(Entry& e, EventTime limit, Sink& sink) {
        if (e.slots.empty()) {
            return;
        }
        auto& s = e.slots.front();
        if (!op_.output && !op_.slide && s.l < limit) {
            Duration wa = op_.window.advance;
            s.l += (limit - s.l + wa - 1) / wa * wa;
            return;
        }
        while (!e.slots.empty() && e.slots.front().l < limit) {
            forward_and_shift(e, sink);
        }
    }

    bool all_empty(const std::vector<State>& states) const {
        if (!op_.is_empty) {
            return false;
        }
        return std::all_of(states.begin(), states.end(), [&](const State& s) { return op_.is_empty(s); });
    }

    /// Re-files an entry in the expiry index after its slots changed, or drops an empty key.
    void settle(Entry& e) {
        if (e.slots.empty()) {
            if (e.indexed_l != kMinTime) {
                index_.erase({e.indexed_l, &e});
                e.indexed_l = kMinTime;
            }
            sigma_.erase(e.key);
            return;
        }
        EventTime first = e.slots.front().l;
        if (e.indexed_l == first) {
            return;
        }
        if (e.indexed_l != kMinTime) {
            index_.erase({e.indexed_l, &e});
        }
        e.indexed_l = first;
        index_.insert({first, &e});
    }

    template <class Sink>
    void handle_input(const Tuple& t, Sink& sink) {
        owned_.clear();
        for (const auto& k : op_.keys(t)) {
            if (mapping_(k) == id_) {
                owned_.push_back(&sigma_.find_or_create(k));
            }
        }
        if (owned_.empty()) {
            return;
        }
        const auto& spec = op_.window;
        EventTime first = earliest_window_start(t.tau, spec);
        EventTime last = op_.single() ? first : latest_window_start(t.tau, spec);
        if (first < rho_) {
            rho_ = first;
        }
        std::uint64_t work = 0;
        for (EventTime l = first; l <= last; l += spec.advance) {
            for (Entry* e : owned_) {
                {
                    WriterGuard<State> guard(sigma_, *e, id_);
                    if (op_.single()) {
                        catch_up(*e, first, sink);
                    }
                    auto& s = sigma_.check_and_create(*e, l);
                    auto r = op_.update(std::move(s.states), e->key, l, t);
                    sigma_.set(s, std::move(r.states));
                    s.source_tau = std::max(s.source_tau, t.tau);
                    s.origin_ns = std::max(s.origin_ns, t.origin_ns);
                    work += r.work;
                    emit(std::move(r.outputs), s, sink);
                }
                settle(*e);
            }
        }
        work_.fetch_add(work, std::memory_order_relaxed);
    }

    template <class Sink>
    void emit(std::vector<Payload>&& payloads, const Slot<State>& s, Sink& sink) {
        for (auto& p : payloads) {
            if (!op_.out_schema.empty() && !op_.out_schema.conforms(p)) {
                throw ConfigError(op_.name + ": output payload does not match schema " + op_.out_schema.name());
            }
            auto out = std::make_shared<Tuple>();
            out->tau = s.l + op_.window.size;
            out->payload = std::move(p);
            out->source_tau = s.source_tau;
            out->origin_ns = s.origin_ns;
            if (out->tau <= out->source_tau) {
                ++causality_violations_;
            }
            if (out->tau < last_out_) {
                ++order_violations_;
            }
            last_out_ = std::max(last_out_, out->tau);
            ++outputs_;
            sink(TuplePtr(std::move(out)));
        }
    }

    const OperatorDef<State>& op_;
    SharedState<State>& sigma_;
    InstanceId id_;
    KeyMapping mapping_;
    Epoch epoch_;
    std::shared_ptr<const ReconfigSpec> next_;
    std::shared_ptr<const ReconfigSpec> pending_activation_;
    EventTime gamma_ = kMaxTime;
    EventTime watermark_ = 0;
    EventTime rho_ = 0;
    EventTime last_out_ = kMinTime;
    std::set<std::pair<EventTime, Entry*>, IndexOrder> index_;
    std::vector<Entry*> owned_;
    std::atomic<std::uint64_t> work_{0};
    std::uint64_t outputs_ = 0;
    std::uint64_t order_violations_ = 0;
    std::uint64_t causality_violations_ = 0;
};

/// Runs an operator on one instance over the given timestamp-ordered tuples.
template <class State>
std::vector<TuplePtr> run_reference(const OperatorDef<State>& op, const std::vector<TuplePtr>& inputs) {
    OperatorDef<State> solo = op;
    solo.mapping = op.mapping.rebased({0});
    SharedState<State> sigma(solo.inputs);
    Instance<State> inst(solo, sigma, 0, solo.mapping);
    std::vector<TuplePtr> out;
    auto sink = [&](TuplePtr t) { out.push_back(std::move(t)); };
    EventTime last = 0;
    for (const auto& t : inputs) {
        inst.process_sn(t, sink);
        last = std::max(last, t->tau);
    }
    inst.flush(last, sink);
    return out;
}

}  // namespace vsn
