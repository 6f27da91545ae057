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

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <variant>
#include <vector>

namespace vsn {

/// Event time in milliseconds since stream start.
using EventTime = std::int64_t;
using Duration = std::int64_t;

inline constexpr EventTime kMinTime = std::numeric_limits<EventTime>::min();
/// Sentinel used for "no reconfiguration pending" and end-of-stream bounds.
inline constexpr EventTime kMaxTime = std::numeric_limits<EventTime>::max() / 4;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using Value = std::variant<std::int64_t, double, std::string, bool>;
using Payload = std::vector<Value>;

enum class FieldType : std::uint8_t { Int, Float, Double, Text, Bool };

struct Field {
    std::string name;
    FieldType type;
};

class Schema {
public:
    Schema() = default;
    Schema(std::string name, std::vector<Field> fields) : name_(std::move(name)), fields_(std::move(fields)) {
        std::unordered_set<std::string> seen;
        for (const auto& f : fields_) {
            if (!seen.insert(f.name).second) {
                throw ConfigError("schema " + name_ + ": duplicate field " + f.name);
            }
        }
    }

    const std::string& name() const { return name_; }
    const std::vector<Field>& fields() const { return fields_; }
    std::size_t size() const { return fields_.size(); }
    bool empty() const { return fields_.empty(); }

    static bool value_matches(const Value& v, FieldType type) {
        switch (type) {
            case FieldType::Int: return std::holds_alternative<std::int64_t>(v);
            case FieldType::Float:
            case FieldType::Double: return std::holds_alternative<double>(v);
            case FieldType::Text: return std::holds_alternative<std::string>(v);
            case FieldType::Bool: return std::holds_alternative<bool>(v);
        }
        return false;
    }

    bool conforms(const Payload& p) const {
        if (p.size() != fields_.size()) {
            return false;
        }
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (!value_matches(p[i], fields_[i].type)) {
                return false;
            }
        }
        return true;
    }

private:
    std::string name_;
    std::vector<Field> fields_;
};

enum class TupleKind : std::uint8_t { Regular, Control, Dummy, Flush };

struct ReconfigSpec;

struct Tuple {
    EventTime tau = 0;
    TupleKind kind = TupleKind::Regular;
    /// Logical input stream the tuple belongs to (0 for single-input operators).
    std::uint32_t stream = 0;
    Payload payload;
    std::shared_ptr<const ReconfigSpec> control;

    // Provenance, carried for metrics and checks only.
    /// Largest tau among the inputs that contributed to this tuple (its own tau for inputs).
    EventTime source_tau = kMinTime;
    /// Wall-clock arrival (steady clock ns) of the latest contributing input.
    std::int64_t origin_ns = 0;
};

using TuplePtr = std::shared_ptr<const Tuple>;

inline TuplePtr make_tuple(EventTime tau, Payload payload, std::uint32_t stream = 0) {
    auto t = std::make_shared<Tuple>();
    t->tau = tau;
    t->stream = stream;
    t->payload = std::move(payload);
    t->source_tau = tau;
    return t;
}

namespace detail {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline constexpr std::uint64_t kKeyHashSeed = 0x5bd1e9955bd1e995ULL;

inline std::uint64_t hash_bytes(std::string_view bytes, std::uint64_t seed = kKeyHashSeed) {
    std::uint64_t h = 0xcbf29ce484222325ULL ^ seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return splitmix64(h);
}

inline EventTime floor_div(EventTime a, EventTime b) {
    EventTime q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) {
        --q;
    }
    return q;
}

}  // namespace detail

/// Grouping key: opaque text with a stable seeded hash. Integer keys keep their value for
/// modulo-style mappings.
class Key {
public:
    Key() : hash_(detail::hash_bytes({})) {}
    explicit Key(std::string bytes) : bytes_(std::move(bytes)), hash_(detail::hash_bytes(bytes_)) {}

    static Key from_int(std::int64_t v) {
        Key k(std::to_string(v));
        k.int_value_ = v;
        k.is_int_ = true;
        return k;
    }

    const std::string& bytes() const { return bytes_; }
    std::uint64_t hash() const { return hash_; }
    bool is_int() const { return is_int_; }
    std::int64_t as_int() const {
        if (is_int_) {
            return int_value_;
        }
        std::int64_t v = 0;
        auto [ptr, ec] = std::from_chars(bytes_.data(), bytes_.data() + bytes_.size(), v);
        if (ec != std::errc() || ptr != bytes_.data() + bytes_.size()) {
            throw ConfigError("key is not an integer: " + bytes_);
        }
        return v;
    }

    friend bool operator==(const Key& a, const Key& b) { return a.hash_ == b.hash_ && a.bytes_ == b.bytes_; }
    friend bool operator<(const Key& a, const Key& b) { return a.bytes_ < b.bytes_; }

private:
    std::string bytes_;
    std::uint64_t hash_;
    std::int64_t int_value_ = 0;
    bool is_int_ = false;
};

struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept { return static_cast<std::size_t>(k.hash()); }
};

using KeySet = std::vector<Key>;

/// Drops repeated keys, keeping first occurrences in order.
inline KeySet dedupe_keys(KeySet keys) {
    if (keys.size() < 2) {
        return keys;
    }
    std::unordered_set<Key, KeyHash> seen;
    seen.reserve(keys.size());
    KeySet out;
    out.reserve(keys.size());
    for (auto& k : keys) {
        if (seen.insert(k).second) {
            out.push_back(std::move(k));
        }
    }
    return out;
}

enum class WindowType : std::uint8_t { Single, Multi };

struct WindowSpec {
    Duration advance = 1;
    Duration size = 1;
    WindowType type = WindowType::Multi;

    void validate() const {
        if (advance <= 0 || size <= 0 || advance > size) {
            throw ConfigError("window spec requires 0 < advance <= size");
        }
    }
};

/// Left boundary of the earliest window instance containing tau.
inline EventTime earliest_window_start(EventTime tau, const WindowSpec& spec) {
    EventTime l = (detail::floor_div(tau - spec.size, spec.advance) + 1) * spec.advance;
    return std::max<EventTime>(l, 0);
}

/// Left boundary of the latest window instance containing tau.
inline EventTime latest_window_start(EventTime tau, const WindowSpec& spec) {
    return detail::floor_div(tau, spec.advance) * spec.advance;
}

/// Every left boundary l (multiple of advance, l >= 0) with l <= tau < l + size, ascending.
inline std::vector<EventTime> window_left_boundaries(EventTime tau, const WindowSpec& spec) {
    std::vector<EventTime> out;
    if (tau < 0) {
        return out;
    }
    for (EventTime l = earliest_window_start(tau, spec); l <= latest_window_start(tau, spec); l += spec.advance) {
        out.push_back(l);
    }
    return out;
}

template <class State>
struct WindowInstance {
    State zeta;
    EventTime l = 0;
    Key k;
};

inline bool expired(EventTime left, EventTime watermark, const WindowSpec& spec) {
    return left + spec.size <= watermark;
}

template <class State>
bool expired(const WindowInstance<State>& w, EventTime watermark, const WindowSpec& spec) {
    return expired(w.l, watermark, spec);
}

class Watermark {
public:
    explicit Watermark(EventTime initial = 0) : value_(initial) {}
    EventTime value() const { return value_; }
    /// Returns true if the value grew.
    bool update(EventTime tau) {
        if (tau > value_) {
            value_ = tau;
            return true;
        }
        return false;
    }

private:
    EventTime value_;
};

// Textual tuple format: `tau,field1,field2,...`. Text fields containing a comma, a quote
// or a line break are quoted with doubled inner quotes.

inline std::string format_value(const Value& v) {
    if (const auto* i = std::get_if<std::int64_t>(&v)) {
        return std::to_string(*i);
    }
    if (const auto* d = std::get_if<double>(&v)) {
        char buf[40];
        std::snprintf(buf, sizeof buf, "%.17g", *d);
        return buf;
    }
    if (const auto* b = std::get_if<bool>(&v)) {
        return *b ? "true" : "false";
    }
    const auto& s = std::get<std::string>(v);
    if (s.find_first_of(",\"\n\r") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += '"';
        }
        out += c;
    }
    out += '"';
    return out;
}

inline std::string format_payload(const Payload& p) {
    std::string out;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (i) {
            out += ',';
        }
        out += format_value(p[i]);
    }
    return out;
}

inline std::string format_tuple(const Tuple& t) {
    std::string out = std::to_string(t.tau);
    if (!t.payload.empty()) {
        out += ',';
        out += format_payload(t.payload);
    }
    return out;
}

namespace detail {

inline std::vector<std::string> split_fields(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"' && cur.empty()) {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) {
        throw ConfigError("unterminated quote in tuple line");
    }
    out.push_back(std::move(cur));
    return out;
}

inline std::int64_t parse_int(const std::string& s) {
    std::int64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw ConfigError("bad integer field: " + s);
    }
    return v;
}

}  // namespace detail

inline Value parse_value(const std::string& s, FieldType type) {
    switch (type) {
        case FieldType::Int: return detail::parse_int(s);
        case FieldType::Float:
        case FieldType::Double: {
            std::size_t used = 0;
            double d = 0;
            try {
                d = std::stod(s, &used);
            } catch (const std::exception&) {
                throw ConfigError("bad float field: " + s);
            }
            if (used != s.size()) {
                throw ConfigError("bad float field: " + s);
            }
            return d;
        }
        case FieldType::Text: return s;
        case FieldType::Bool:
            if (s == "true" || s == "1") {
                return true;
            }
            if (s == "false" || s == "0") {
                return false;
            }
            throw ConfigError("bad boolean field: " + s);
    }
    throw ConfigError("unknown field type");
}

inline TuplePtr parse_tuple(std::string_view line, const Schema& schema, std::uint32_t stream = 0) {
    while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) {
        line.remove_suffix(1);
    }
    auto parts = detail::split_fields(line);
    if (parts.size() != schema.size() + 1) {
        throw ConfigError("tuple line has " + std::to_string(parts.size() - 1) + " fields, schema " +
                          schema.name() + " expects " + std::to_string(schema.size()));
    }
    Payload p;
    p.reserve(schema.size());
    for (std::size_t i = 0; i < schema.size(); ++i) {
        p.push_back(parse_value(parts[i + 1], schema.fields()[i].type));
    }
    EventTime tau = detail::parse_int(parts[0]);
    if (tau < 0) {
        throw ConfigError("negative event time");
    }
    return make_tuple(tau, std::move(p), stream);
}

}  // namespace vsn
