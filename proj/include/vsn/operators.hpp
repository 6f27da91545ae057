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

#include <cctype>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace vsn {

inline constexpr Duration kSecond = 1000;
inline constexpr Duration kMinute = 60 * kSecond;

/// Input schema of the text workloads.
inline Schema tweet_schema() { return Schema("tweet", {{"user", FieldType::Text}, {"text", FieldType::Text}}); }

/// Lowercased tokens of a text, split on ASCII whitespace.
inline std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) {
                out.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

inline const std::string& text_field(const Tuple& t) { return std::get<std::string>(t.payload.at(1)); }

/// Distinct hashtags of a text, without the leading '#'.
inline KeySet hashtags(std::string_view text) {
    KeySet keys;
    for (auto& w : tokenize(text)) {
        if (w.size() > 1 && w[0] == '#') {
            keys.emplace_back(w.substr(1));
        }
    }
    return dedupe_keys(std::move(keys));
}

inline KeySet distinct_words(std::string_view text) {
    KeySet keys;
    for (auto& w : tokenize(text)) {
        keys.emplace_back(std::move(w));
    }
    return dedupe_keys(std::move(keys));
}

inline constexpr std::size_t kUnboundedDistance = std::numeric_limits<std::size_t>::max();

/// Distinct ordered word pairs (w[i], w[j]) with i < j and j - i <= max_distance, keyed "a b".
inline KeySet word_pairs(std::string_view text, std::size_t max_distance) {
    auto words = tokenize(text);
    KeySet keys;
    for (std::size_t i = 0; i < words.size(); ++i) {
        for (std::size_t j = i + 1; j < words.size() && j - i <= max_distance; ++j) {
            keys.emplace_back(words[i] + " " + words[j]);
        }
    }
    return dedupe_keys(std::move(keys));
}

struct CountState {
    std::int64_t count = 0;
};

inline Schema count_schema(const std::string& name, const std::string& key_field) {
    return Schema(name, {{key_field, FieldType::Text}, {"count", FieldType::Int}});
}

inline std::vector<Payload> emit_count(const std::vector<CountState>& w, const Key& k, EventTime) {
    return {Payload{k.bytes(), w[0].count}};
}

/// Longest tweet per hashtag.
inline OperatorDef<CountState> hashtag_maxlen(WindowSpec window = {30 * kMinute, 60 * kMinute, WindowType::Multi}) {
    OperatorDef<CountState> op;
    op.name = "hashtag-maxlen";
    op.window = window;
    op.keys = [](const Tuple& t) { return hashtags(text_field(t)); };
    op.out_schema = count_schema("hashtag_maxlen", "hashtag");
    op.update = [](std::vector<CountState>&& w, const Key&, EventTime, const Tuple& t) {
        auto len = static_cast<std::int64_t>(text_field(t).size());
        w[0].count = std::max(w[0].count, len);
        return UpdateResult<CountState>{std::move(w), {}, 1};
    };
    op.output = emit_count;
    return op;
}

inline OperatorDef<CountState> counting_op(std::string name, std::function<KeySet(const Tuple&)> keys,
                                           const std::string& key_field, WindowSpec window) {
    OperatorDef<CountState> op;
    op.name = std::move(name);
    op.window = window;
    op.keys = std::move(keys);
    op.out_schema = count_schema(op.name, key_field);
    op.update = [](std::vector<CountState>&& w, const Key&, EventTime, const Tuple&) {
        ++w[0].count;
        return UpdateResult<CountState>{std::move(w), {}, 1};
    };
    op.output = emit_count;
    return op;
}

inline OperatorDef<CountState> wordcount(WindowSpec window = {60 * kSecond, 120 * kSecond, WindowType::Multi}) {
    return counting_op(
        "wordcount", [](const Tuple& t) { return distinct_words(text_field(t)); }, "word", window);
}

/// Pair count; max_distance 3, 10 and kUnboundedDistance give the low/medium/high duplication levels.
inline OperatorDef<CountState> paircount(std::size_t max_distance,
                                         WindowSpec window = {60 * kSecond, 120 * kSecond, WindowType::Multi}) {
    return counting_op(
        "paircount", [max_distance](const Tuple& t) { return word_pairs(text_field(t), max_distance); }, "pair",
        window);
}

// Band join over two streams.

inline Schema join_left_schema() { return Schema("left", {{"x", FieldType::Int}, {"y", FieldType::Float}}); }
inline Schema join_right_schema() {
    return Schema("right",
                  {{"a", FieldType::Int}, {"b", FieldType::Float}, {"c", FieldType::Double}, {"d", FieldType::Bool}});
}

inline std::vector<Field> concat_fields(const Schema& a, const Schema& b) {
    auto f = a.fields();
    f.insert(f.end(), b.fields().begin(), b.fields().end());
    return f;
}

/// |x - a| <= 10 and |y - b| <= 10.
inline bool band_match(const Tuple& l, const Tuple& r) {
    auto x = std::get<std::int64_t>(l.payload[0]);
    auto y = std::get<double>(l.payload[1]);
    auto a = std::get<std::int64_t>(r.payload[0]);
    auto b = std::get<double>(r.payload[1]);
    return std::llabs(x - a) <= 10 && std::fabs(y - b) <= 10.0;
}

inline Schema trade_schema() {
    return Schema("trade", {{"id", FieldType::Int}, {"price", FieldType::Double}, {"average", FieldType::Double}});
}

/// Normalized distance of a trade's price from its running average.
inline double normalized_distance(double price, double average) { return (price - average) / average; }

/// Hedge candidates: different companies moving in opposite directions with comparable size.
inline bool hedge_match(const Tuple& l, const Tuple& r) {
    if (std::get<std::int64_t>(l.payload[0]) == std::get<std::int64_t>(r.payload[0])) {
        return false;
    }
    double nl = normalized_distance(std::get<double>(l.payload[1]), std::get<double>(l.payload[2]));
    double nr = normalized_distance(std::get<double>(r.payload[1]), std::get<double>(r.payload[2]));
    return -1.05 <= nr / nl;
}

struct JoinState {
    std::int64_t c = 0;
    std::deque<TuplePtr> stored;
};

using JoinPredicate = std::function<bool(const Tuple& left, const Tuple& right)>;

/// Parallel window join: every instance sees every tuple, each tuple is stored under exactly one
/// of `key_count` keys (round robin on the shared counter), and matches are emitted as
/// left payload followed by right payload.
inline OperatorDef<JoinState> scalejoin(std::size_t key_count, JoinPredicate match, Duration ws,
                                        Schema left = join_left_schema(), Schema right = join_right_schema()) {
    OperatorDef<JoinState> op;
    op.name = "scalejoin";
    op.window = WindowSpec{1, ws, WindowType::Single};
    op.inputs = 2;
    auto all = std::make_shared<KeySet>();
    for (std::size_t k = 0; k < key_count; ++k) {
        all->push_back(Key::from_int(static_cast<std::int64_t>(k)));
    }
    op.keys = [all](const Tuple&) { return *all; };
    op.mapping = KeyMapping::modulo({0});
    op.out_schema = Schema("join", concat_fields(left, right));
    auto k_count = static_cast<std::int64_t>(key_count);
    op.update = [match = std::move(match), ws, k_count](std::vector<JoinState>&& w, const Key& key, EventTime,
                                                        const Tuple& t) {
        UpdateResult<JoinState> r;
        ++w[0].c;
        ++w[1].c;
        std::size_t self = t.stream == 0 ? 0 : 1;
        auto& mine = w[self];
        auto& opp = w[1 - self];
        while (!opp.stored.empty() && opp.stored.front()->tau + ws < t.tau) {
            opp.stored.pop_front();
        }
        for (const auto& o : opp.stored) {
            ++r.work;
            const Tuple& l = self == 0 ? t : *o;
            const Tuple& rt = self == 0 ? *o : t;
            if (match(l, rt)) {
                Payload p = l.payload;
                p.insert(p.end(), rt.payload.begin(), rt.payload.end());
                r.outputs.push_back(std::move(p));
            }
        }
        if (mine.c % k_count == key.as_int()) {
            mine.stored.push_back(std::make_shared<Tuple>(t));
        }
        r.states = std::move(w);
        return r;
    };
    return op;
}

struct PassState {
    std::int64_t c = 0;
};

/// Forwards every tuple exactly once. Keys 0..key_count-1 map to instances by modulo and take
/// turns on a per-key tuple counter, so the forwarding work is spread round robin.
inline OperatorDef<PassState> passthrough(std::size_t key_count) {
    OperatorDef<PassState> op;
    op.name = "passthrough";
    op.window = WindowSpec{1, 1, WindowType::Single};
    op.inputs = 2;
    auto all = std::make_shared<KeySet>();
    for (std::size_t k = 0; k < key_count; ++k) {
        all->push_back(Key::from_int(static_cast<std::int64_t>(k)));
    }
    op.keys = [all](const Tuple&) { return *all; };
    op.mapping = KeyMapping::modulo({0});
    auto k_count = static_cast<std::int64_t>(key_count);
    op.update = [k_count](std::vector<PassState>&& w, const Key& key, EventTime, const Tuple& t) {
        UpdateResult<PassState> r;
        ++w[0].c;
        if (w[0].c % k_count == key.as_int()) {
            r.outputs.push_back(t.payload);
            r.work = 1;
        }
        r.states = std::move(w);
        return r;
    };
    return op;
}

/// Shared-nothing two-stage pipeline: a stateless map that emits one tuple per key, followed by a
/// single-key aggregate.
struct MapAggregate {
    std::function<std::vector<TuplePtr>(const Tuple&)> map;
    OperatorDef<CountState> aggregate;
};

namespace detail {

inline TuplePtr derived(const Tuple& t, Payload p) {
    auto out = make_tuple(t.tau, std::move(p));
    std::const_pointer_cast<Tuple>(out)->origin_ns = t.origin_ns;
    return out;
}

inline OperatorDef<CountState> keyed_aggregate(std::string name, const std::string& key_field, WindowSpec window,
                                               bool take_max) {
    OperatorDef<CountState> op;
    op.name = std::move(name);
    op.window = window;
    op.keys = [](const Tuple& t) { return KeySet{Key(std::get<std::string>(t.payload.at(0)))}; };
    op.out_schema = count_schema(op.name, key_field);
    if (take_max) {
        op.update = [](std::vector<CountState>&& w, const Key&, EventTime, const Tuple& t) {
            w[0].count = std::max(w[0].count, std::get<std::int64_t>(t.payload.at(1)));
            return UpdateResult<CountState>{std::move(w), {}, 1};
        };
    } else {
        op.update = [](std::vector<CountState>&& w, const Key&, EventTime, const Tuple&) {
            ++w[0].count;
            return UpdateResult<CountState>{std::move(w), {}, 1};
        };
    }
    op.output = emit_count;
    return op;
}

}  // namespace detail

inline MapAggregate hashtag_maxlen_pipeline(WindowSpec window = {30 * kMinute, 60 * kMinute, WindowType::Multi}) {
    MapAggregate p;
    p.map = [](const Tuple& t) {
        std::vector<TuplePtr> out;
        auto len = static_cast<std::int64_t>(text_field(t).size());
        for (const auto& h : hashtags(text_field(t))) {
            out.push_back(detail::derived(t, {h.bytes(), len}));
        }
        return out;
    };
    p.aggregate = detail::keyed_aggregate("hashtag-maxlen", "hashtag", window, true);
    return p;
}

inline MapAggregate wordcount_pipeline(WindowSpec window = {60 * kSecond, 120 * kSecond, WindowType::Multi}) {
    MapAggregate p;
    p.map = [](const Tuple& t) {
        std::vector<TuplePtr> out;
        for (const auto& w : distinct_words(text_field(t))) {
            out.push_back(detail::derived(t, {w.bytes()}));
        }
        return out;
    };
    p.aggregate = detail::keyed_aggregate("wordcount", "word", window, false);
    return p;
}

inline MapAggregate paircount_pipeline(std::size_t max_distance,
                                       WindowSpec window = {60 * kSecond, 120 * kSecond, WindowType::Multi}) {
    MapAggregate p;
    p.map = [max_distance](const Tuple& t) {
        std::vector<TuplePtr> out;
        for (const auto& k : word_pairs(text_field(t), max_distance)) {
            out.push_back(detail::derived(t, {k.bytes()}));
        }
        return out;
    };
    p.aggregate = detail::keyed_aggregate("paircount", "pair", window, false);
    return p;
}

}  // namespace vsn
