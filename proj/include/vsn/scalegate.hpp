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

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace vsn {

using SourceId = std::size_t;
using ReaderId = std::size_t;

/// Broken caller contract (e.g. a source adding out of timestamp order).
class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Exponential backoff: a few yields, then sleeps doubling from 1 us to 1 ms.
class Backoff {
public:
    void pause() {
        if (yields_ < 8) {
            ++yields_;
            std::this_thread::yield();
            return;
        }
        std::this_thread::sleep_for(delay_);
        delay_ = std::min(delay_ * 2, std::chrono::microseconds(1000));
    }
    void reset() {
        yields_ = 0;
        delay_ = std::chrono::microseconds(1);
    }

private:
    unsigned yields_ = 0;
    std::chrono::microseconds delay_{1};
};

struct GateOptions {
    /// Max nodes inserted but not yet passed by every active reader.
    std::uint64_t flow_bound = std::uint64_t{1} << 20;
};

/// Timestamp-merging buffer with fixed sources and readers.
///
/// Nodes form a singly linked list sorted by tau. Each source keeps a handle on the last node
/// it inserted; a node is ready once it strictly precedes every handle, which is tracked with
/// a per-node handle count. Sources insert by walking forward from their own handle.
class ScaleGate {
public:
    ScaleGate(std::size_t sources, std::size_t readers, GateOptions opts = {})
        : ScaleGate(sources, readers, all_ids(sources), all_ids(readers), opts) {}

    ScaleGate(const ScaleGate&) = delete;
    ScaleGate& operator=(const ScaleGate&) = delete;

    virtual ~ScaleGate() {
        Node* n = reclaim_head_;
        while (n) {
            Node* next = n->next.load(std::memory_order_relaxed);
            delete n;
            n = next;
        }
    }

    /// Merges t from source i. Waits while the flow-control bound is reached.
    void add(TuplePtr t, SourceId i) {
        if (!t) {
            throw ContractViolation("null tuple");
        }
        if (t->kind == TupleKind::Dummy || t->kind == TupleKind::Flush) {
            throw ContractViolation("internal tuple kinds cannot be added");
        }
        EventTime tau = t->tau;
        TupleKind kind = t->kind;
        insert_from_source(i, tau, kind, std::move(t));
    }

    /// Heartbeat: inserts a Dummy at tau for source i so readiness can advance without data.
    void advance(SourceId i, EventTime tau) {
        auto& s = source_slot(i);
        if (tau <= s.last_tau) {
            return;
        }
        insert_from_source(i, tau, TupleKind::Dummy, nullptr);
    }

    /// Next ready Regular/Control tuple for reader j, or null.
    TuplePtr get(ReaderId j) {
        auto& r = reader_slot(j);
        if (!r.active.load(std::memory_order_acquire)) {
            throw ContractViolation("get by inactive reader " + std::to_string(j));
        }
        for (;;) {
            Node* cur = r.cursor;
            if (cur->handles.load(std::memory_order_acquire) != 0) {
                return nullptr;
            }
            Node* next = cur->next.load(std::memory_order_acquire);
            if (!next || next->handles.load(std::memory_order_acquire) != 0) {
                return nullptr;
            }
            r.cursor = next;
            r.passed.store(r.passed.load(std::memory_order_relaxed) + 1, std::memory_order_release);
            if (next->kind == TupleKind::Regular || next->kind == TupleKind::Control) {
                return next->tuple;
            }
        }
    }

    /// True once no source is active and reader j has consumed everything.
    bool drained(ReaderId j) const {
        const auto& r = readers_[j];
        return active_sources_.load(std::memory_order_acquire) == 0 &&
               r.cursor->next.load(std::memory_order_acquire) == nullptr;
    }

    /// End of stream for source i: its pending tuples become ready and it stops counting.
    void close_source(SourceId i) {
        auto& s = source_slot(i);
        if (!s.active.load(std::memory_order_acquire)) {
            return;
        }
        retire_source(i);
    }

    std::size_t source_capacity() const { return sources_.size(); }
    std::size_t reader_capacity() const { return readers_.size(); }
    std::size_t active_sources() const { return active_sources_.load(std::memory_order_acquire); }
    std::size_t active_readers() const { return active_readers_.load(std::memory_order_acquire); }
    bool source_active(SourceId i) const { return sources_.at(i).active.load(std::memory_order_acquire); }
    bool reader_active(ReaderId j) const { return readers_.at(j).active.load(std::memory_order_acquire); }

    /// Regular and Control tuples added so far.
    std::uint64_t insertions() const { return insertions_.load(std::memory_order_relaxed); }
    /// All nodes linked so far, including Dummy and Flush.
    std::uint64_t nodes_inserted() const { return nodes_.load(std::memory_order_relaxed); }
    std::uint64_t nodes_freed() const { return freed_count_.load(std::memory_order_relaxed); }

protected:
    struct Node {
        TuplePtr tuple;
        EventTime tau = kMinTime;
        TupleKind kind = TupleKind::Dummy;
        std::atomic<Node*> next{nullptr};
        std::atomic<std::uint32_t> handles{1};
    };

    struct alignas(64) SourceSlot {
        Node* handle = nullptr;
        EventTime last_tau = kMinTime;
        /// Copy of last_tau readable by other sources for flow control.
        std::atomic<EventTime> published_tau{kMinTime};
        std::uint32_t since_reclaim = 0;
        std::atomic<bool> active{false};
    };

    struct alignas(64) ReaderSlot {
        Node* cursor = nullptr;
        std::atomic<std::uint64_t> passed{0};
        std::atomic<bool> active{false};
    };

    ScaleGate(std::size_t source_capacity, std::size_t reader_capacity, const std::vector<SourceId>& initial_sources,
              const std::vector<ReaderId>& initial_readers, GateOptions opts)
        : opts_(opts), sources_(source_capacity), readers_(reader_capacity) {
        head_ = new Node;
        head_->tau = kMinTime;
        head_->handles.store(static_cast<std::uint32_t>(initial_sources.size()), std::memory_order_relaxed);
        reclaim_head_ = head_;
        for (SourceId i : initial_sources) {
            auto& s = sources_.at(i);
            if (s.active.load(std::memory_order_relaxed)) {
                throw ConfigError("duplicate initial source");
            }
            s.handle = head_;
            s.active.store(true, std::memory_order_relaxed);
        }
        for (ReaderId j : initial_readers) {
            auto& r = readers_.at(j);
            if (r.active.load(std::memory_order_relaxed)) {
                throw ConfigError("duplicate initial reader");
            }
            r.cursor = head_;
            r.active.store(true, std::memory_order_relaxed);
        }
        active_sources_.store(initial_sources.size(), std::memory_order_release);
        active_readers_.store(initial_readers.size(), std::memory_order_release);
    }

    static std::vector<std::size_t> all_ids(std::size_t n) {
        std::vector<std::size_t> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = i;
        }
        return v;
    }

    SourceSlot& source_slot(SourceId i) {
        if (i >= sources_.size()) {
            throw ContractViolation("unknown source " + std::to_string(i));
        }
        return sources_[i];
    }
    ReaderSlot& reader_slot(ReaderId j) {
        if (j >= readers_.size()) {
            throw ContractViolation("unknown reader " + std::to_string(j));
        }
        return readers_[j];
    }

    /// Links node n after the last node with tau <= n->tau, starting the walk at `from`.
    void link_after_walk(Node* from, Node* n) {
        Node* pred = from;
        for (;;) {
            Node* next = pred->next.load(std::memory_order_acquire);
            if (next && next->tau <= n->tau) {
                pred = next;
                continue;
            }
            n->next.store(next, std::memory_order_relaxed);
            if (pred->next.compare_exchange_weak(next, n, std::memory_order_release, std::memory_order_acquire)) {
                nodes_.fetch_add(1, std::memory_order_relaxed);
                return;
            }
        }
    }

    void insert_from_source(SourceId i, EventTime tau, TupleKind kind, TuplePtr t) {
        auto& s = source_slot(i);
        if (!s.active.load(std::memory_order_acquire)) {
            throw ContractViolation("add by inactive source " + std::to_string(i));
        }
        if (tau < s.last_tau) {
            throw ContractViolation("source " + std::to_string(i) + " added tau " + std::to_string(tau) +
                                    " after " + std::to_string(s.last_tau));
        }
        if (kind != TupleKind::Dummy) {
            wait_for_room(s);
        }
        Node* n = new Node;
        n->tuple = std::move(t);
        n->tau = tau;
        n->kind = kind;
        link_after_walk(s.handle, n);
        Node* old = s.handle;
        s.handle = n;
        s.last_tau = tau;
        s.published_tau.store(tau, std::memory_order_release);
        old->handles.fetch_sub(1, std::memory_order_acq_rel);
        if (kind == TupleKind::Regular || kind == TupleKind::Control) {
            insertions_.fetch_add(1, std::memory_order_relaxed);
        }
        if (++s.since_reclaim >= 64) {
            s.since_reclaim = 0;
            try_reclaim();
        }
    }

    /// Appends a Flush at the source's handle and drops the handle.
    void retire_source(SourceId i) {
        auto& s = sources_[i];
        Node* f = new Node;
        f->tau = s.handle->tau;
        f->kind = TupleKind::Flush;
        link_after_walk(s.handle, f);
        Node* old = s.handle;
        s.handle = nullptr;
        s.active.store(false, std::memory_order_release);
        old->handles.fetch_sub(1, std::memory_order_acq_rel);
        f->handles.fetch_sub(1, std::memory_order_acq_rel);
        active_sources_.fetch_sub(1, std::memory_order_acq_rel);
    }

    std::uint64_t min_passed() const {
        std::uint64_t m = UINT64_MAX;
        for (const auto& r : readers_) {
            if (r.active.load(std::memory_order_acquire)) {
                m = std::min(m, r.passed.load(std::memory_order_acquire));
            }
        }
        return m;
    }

    /// True if s is one of several active sources and none has a handle strictly earlier.
    bool holds_earliest_handle(const SourceSlot& s) const {
        if (active_sources_.load(std::memory_order_acquire) < 2) {
            return false;
        }
        for (const auto& o : sources_) {
            if (&o != &s && o.active.load(std::memory_order_acquire) &&
                o.published_tau.load(std::memory_order_acquire) < s.last_tau) {
                return false;
            }
        }
        return true;
    }

    /// Waits while the bound is reached. With several sources, the one with the earliest handle is
    /// never held back: tuples behind the other handles stay unready until it advances.
    void wait_for_room(const SourceSlot& s) {
        Backoff backoff;
        for (;;) {
            std::uint64_t low = min_passed();
            if (low == UINT64_MAX || nodes_.load(std::memory_order_relaxed) - low < opts_.flow_bound) {
                return;
            }
            if (holds_earliest_handle(s)) {
                return;
            }
            try_reclaim();
            backoff.pause();
        }
    }

    /// Frees nodes every active reader has moved past. One reclaimer at a time.
    void try_reclaim() {
        if (reclaiming_.test_and_set(std::memory_order_acquire)) {
            return;
        }
        std::uint64_t low = min_passed();
        if (low != UINT64_MAX) {
            // reclaim_head_ sits at list position freed_; positions below `low` are behind every cursor.
            while (freed_ < low) {
                Node* next = reclaim_head_->next.load(std::memory_order_acquire);
                if (!next) {
                    break;
                }
                delete reclaim_head_;
                reclaim_head_ = next;
                ++freed_;
            }
            freed_count_.store(freed_, std::memory_order_relaxed);
        }
        reclaiming_.clear(std::memory_order_release);
    }

    GateOptions opts_;
    Node* head_ = nullptr;
    std::vector<SourceSlot> sources_;
    std::vector<ReaderSlot> readers_;
    std::atomic<std::size_t> active_sources_{0};
    std::atomic<std::size_t> active_readers_{0};
    std::atomic<std::uint64_t> insertions_{0};
    std::atomic<std::uint64_t> nodes_{0};

    std::atomic_flag reclaiming_ = ATOMIC_FLAG_INIT;
    Node* reclaim_head_ = nullptr;
    std::uint64_t freed_ = 0;
    std::atomic<std::uint64_t> freed_count_{0};
};

/// ScaleGate with dynamic membership. Each mutation category has a single-winner claim.
class ElasticScaleGate : public ScaleGate {
public:
    ElasticScaleGate(std::size_t source_capacity, std::size_t reader_capacity,
                     const std::vector<SourceId>& initial_sources, const std::vector<ReaderId>& initial_readers,
                     GateOptions opts = {})
        : ScaleGate(source_capacity, reader_capacity, initial_sources, initial_readers, opts) {}

    /// Adds readers R, each starting at reader j's current position.
    bool add_readers(std::span<const ReaderId> R, ReaderId j) {
        Claim claim(reader_add_);
        if (!claim.won) {
            return false;
        }
        auto& from = reader_slot(j);
        if (!from.active.load(std::memory_order_acquire)) {
            return false;
        }
        bool all = true;
        for (ReaderId r : R) {
            if (r >= readers_.size() || readers_[r].active.load(std::memory_order_acquire)) {
                all = false;
                continue;
            }
            auto& slot = readers_[r];
            slot.cursor = from.cursor;
            slot.passed.store(from.passed.load(std::memory_order_acquire), std::memory_order_relaxed);
            slot.active.store(true, std::memory_order_release);
            active_readers_.fetch_add(1, std::memory_order_acq_rel);
        }
        return all;
    }

    bool remove_readers(std::span<const ReaderId> R) {
        Claim claim(reader_remove_);
        if (!claim.won) {
            return false;
        }
        bool all = true;
        for (ReaderId r : R) {
            if (r >= readers_.size() || !readers_[r].active.load(std::memory_order_acquire)) {
                all = false;
                continue;
            }
            readers_[r].active.store(false, std::memory_order_release);
            active_readers_.fetch_sub(1, std::memory_order_acq_rel);
        }
        return all;
    }

    /// Adds sources S; each starts with a Dummy placed right after the caller's handle.
    bool add_sources(std::span<const SourceId> S, SourceId caller) {
        Claim claim(source_add_);
        if (!claim.won) {
            return false;
        }
        auto& c = source_slot(caller);
        if (!c.active.load(std::memory_order_acquire)) {
            return false;
        }
        bool all = true;
        for (SourceId s : S) {
            if (s >= sources_.size() || sources_[s].active.load(std::memory_order_acquire)) {
                all = false;
                continue;
            }
            Node* d = new Node;
            d->tau = c.handle->tau;
            d->kind = TupleKind::Dummy;
            Node* pred = c.handle;
            for (;;) {
                Node* next = pred->next.load(std::memory_order_acquire);
                d->next.store(next, std::memory_order_relaxed);
                if (pred->next.compare_exchange_weak(next, d, std::memory_order_release, std::memory_order_acquire)) {
                    break;
                }
            }
            nodes_.fetch_add(1, std::memory_order_relaxed);
            auto& slot = sources_[s];
            slot.handle = d;
            slot.last_tau = d->tau;
            slot.published_tau.store(d->tau, std::memory_order_release);
            slot.since_reclaim = 0;
            active_sources_.fetch_add(1, std::memory_order_acq_rel);
            slot.active.store(true, std::memory_order_release);
        }
        return all;
    }

    /// Removes sources S; their buffered tuples become ready.
    bool remove_sources(std::span<const SourceId> S) {
        Claim claim(source_remove_);
        if (!claim.won) {
            return false;
        }
        bool all = true;
        for (SourceId s : S) {
            if (s >= sources_.size() || !sources_[s].active.load(std::memory_order_acquire)) {
                all = false;
                continue;
            }
            retire_source(s);
        }
        return all;
    }

private:
    struct Claim {
        explicit Claim(std::atomic_flag& f) : flag(f), won(!f.test_and_set(std::memory_order_acq_rel)) {}
        ~Claim() {
            if (won) {
                flag.clear(std::memory_order_release);
            }
        }
        std::atomic_flag& flag;
        bool won;
    };

    std::atomic_flag reader_add_ = ATOMIC_FLAG_INIT;
    std::atomic_flag reader_remove_ = ATOMIC_FLAG_INIT;
    std::atomic_flag source_add_ = ATOMIC_FLAG_INIT;
    std::atomic_flag source_remove_ = ATOMIC_FLAG_INIT;
};

}  // namespace vsn
