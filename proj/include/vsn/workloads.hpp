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
#include <vsn/operators.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace vsn {

/// Constant input rate for a stretch of (event) time.
struct RatePhase {
    std::int64_t duration_s = 1;
    std::int64_t rate_tps = 0;
};

namespace detail {

inline std::int64_t parse_int(std::string_view s, std::string_view what) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
        throw ConfigError("bad " + std::string(what) + ": '" + std::string(s) + "'");
    }
    return v;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && s.front() == ' ') {
        s.remove_prefix(1);
    }
    while (!s.empty() && s.back() == ' ') {
        s.remove_suffix(1);
    }
    return s;
}

/// Uniform double in [0, 1) derived from a hash.
inline double unit(std::uint64_t h) { return static_cast<double>(h >> 11) * 0x1.0p-53; }

/// Hash of (seed, index, lane): streams are pure functions of these.
inline std::uint64_t draw(std::uint64_t seed, std::uint64_t index, std::uint64_t lane) {
    return splitmix64(splitmix64(seed ^ splitmix64(index)) + lane * 0x9e3779b97f4a7c15ULL);
}

}  // namespace detail

/// Parses a duration: plain seconds, or a number with ms/s/m/h suffix. Returns milliseconds.
inline Duration parse_duration_ms(std::string_view s) {
    s = detail::trim(s);
    struct Unit {
        std::string_view suffix;
        Duration ms;
    };
    for (Unit u : {Unit{"ms", 1}, Unit{"s", 1000}, Unit{"m", 60000}, Unit{"h", 3600000}}) {
        if (s.size() > u.suffix.size() && s.substr(s.size() - u.suffix.size()) == u.suffix) {
            auto num = s.substr(0, s.size() - u.suffix.size());
            // "5ms" also ends in "s"; the ms entry comes first.
            return detail::parse_int(num, "duration") * u.ms;
        }
    }
    return detail::parse_int(s, "duration") * 1000;
}

/// Parses "30s@2000,10s@500": duration then rate in tuples per second.
inline std::vector<RatePhase> parse_phases(std::string_view spec) {
    std::vector<RatePhase> out;
    while (!spec.empty()) {
        auto comma = spec.find(',');
        auto item = detail::trim(spec.substr(0, comma));
        spec = comma == std::string_view::npos ? std::string_view{} : spec.substr(comma + 1);
        auto at = item.find('@');
        if (at == std::string_view::npos) {
            throw ConfigError("phase '" + std::string(item) + "' is not DURATION@RATE");
        }
        Duration ms = parse_duration_ms(item.substr(0, at));
        if (ms < 1000 || ms % 1000 != 0) {
            throw ConfigError("phase duration must be a whole number of seconds >= 1");
        }
        std::int64_t rate = detail::parse_int(detail::trim(item.substr(at + 1)), "rate");
        if (rate < 0) {
            throw ConfigError("phase rate must be >= 0");
        }
        out.push_back({ms / 1000, rate});
    }
    if (out.empty()) {
        throw ConfigError("no phases given");
    }
    return out;
}

/// Event times of a phased stream: tuple j of a phase with rate r sits at start + floor(j*1000/r).
class Schedule {
public:
    explicit Schedule(std::vector<RatePhase> phases) : phases_(std::move(phases)) {
        std::int64_t start = 0;
        std::uint64_t first = 0;
        for (const auto& p : phases_) {
            starts_.push_back({first, start});
            first += static_cast<std::uint64_t>(p.duration_s * p.rate_tps);
            ends_.push_back(first);
            start += p.duration_s * 1000;
        }
        total_ = first;
        end_ms_ = start;
    }

    std::uint64_t size() const { return total_; }
    EventTime end_ms() const { return end_ms_; }
    const std::vector<RatePhase>& phases() const { return phases_; }

    EventTime tau(std::uint64_t i) const {
        // The phase holding tuple i is the first whose end index exceeds i.
        auto k = static_cast<std::size_t>(std::upper_bound(ends_.begin(), ends_.end(), i) - ends_.begin());
        k = std::min(k, phases_.size() - 1);
        const auto& p = phases_[k];
        auto j = static_cast<std::int64_t>(i - starts_[k].first);
        return starts_[k].second + j * 1000 / std::max<std::int64_t>(p.rate_tps, 1);
    }

    /// Rate in effect at event time tau.
    std::int64_t rate_at(EventTime tau) const {
        for (std::size_t k = 0; k < phases_.size(); ++k) {
            if (tau < starts_[k].second + phases_[k].duration_s * 1000) {
                return phases_[k].rate_tps;
            }
        }
        return 0;
    }

private:
    std::vector<RatePhase> phases_;
    std::vector<std::pair<std::uint64_t, EventTime>> starts_;
    std::vector<std::uint64_t> ends_;
    std::uint64_t total_ = 0;
    EventTime end_ms_ = 0;
};

inline Schedule constant_rate(std::uint64_t count, std::int64_t rate_tps) {
    auto seconds = static_cast<std::int64_t>((count + static_cast<std::uint64_t>(rate_tps) - 1) /
                                             static_cast<std::uint64_t>(rate_tps));
    return Schedule({{std::max<std::int64_t>(seconds, 1), rate_tps}});
}

// Join workload: left (x int, y float) and right (a int, b float, c double, d bool), with x, y, a,
// b uniform integers over [1, 10000]. Tuple i belongs to stream i % 2.

inline constexpr std::int64_t kJoinDomain = 10000;

inline TuplePtr join_tuple(std::uint64_t seed, std::uint64_t i, EventTime tau) {
    auto t = std::make_shared<Tuple>();
    t->tau = tau;
    t->stream = static_cast<std::uint32_t>(i % 2);
    auto v = [&](std::uint64_t lane) {
        return static_cast<std::int64_t>(detail::draw(seed, i, lane) % kJoinDomain) + 1;
    };
    if (t->stream == 0) {
        t->payload = {v(1), static_cast<double>(v(2))};
    } else {
        t->payload = {v(1), static_cast<double>(v(2)), detail::unit(detail::draw(seed, i, 3)),
                      (detail::draw(seed, i, 4) & 1) != 0};
    }
    t->source_tau = tau;
    return t;
}

inline std::vector<TuplePtr> gen_join_stream(std::uint64_t seed, const Schedule& schedule) {
    std::vector<TuplePtr> out;
    out.reserve(schedule.size());
    for (std::uint64_t i = 0; i < schedule.size(); ++i) {
        out.push_back(join_tuple(seed, i, schedule.tau(i)));
    }
    return out;
}

/// Text workload: tweets of Zipf-distributed words w0..w{vocab-1}; a word is a hashtag with the
/// given probability.
class TextGenerator {
public:
    TextGenerator(std::uint64_t seed, std::size_t vocab = 1000, std::size_t words_per_tuple = 10,
                  double hashtag_share = 0.1, double zipf_s = 1.0)
        : seed_(seed), words_(words_per_tuple), hashtag_share_(hashtag_share) {
        if (vocab == 0 || words_per_tuple == 0) {
            throw ConfigError("vocabulary and words per tuple must be positive");
        }
        cdf_.reserve(vocab);
        double acc = 0;
        for (std::size_t r = 1; r <= vocab; ++r) {
            acc += 1.0 / std::pow(static_cast<double>(r), zipf_s);
            cdf_.push_back(acc);
        }
        for (auto& c : cdf_) {
            c /= acc;
        }
    }

    std::string text(std::uint64_t i) const {
        std::string out;
        for (std::size_t w = 0; w < words_; ++w) {
            double u = detail::unit(detail::draw(seed_, i, 2 * w + 1));
            auto rank = static_cast<std::size_t>(std::lower_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
            rank = std::min(rank, cdf_.size() - 1);
            if (!out.empty()) {
                out += ' ';
            }
            if (detail::unit(detail::draw(seed_, i, 2 * w + 2)) < hashtag_share_) {
                out += '#';
            }
            out += 'w';
            out += std::to_string(rank);
        }
        return out;
    }

    TuplePtr tuple(std::uint64_t i, EventTime tau) const {
        auto user = "u" + std::to_string(detail::draw(seed_, i, 0) % 1000);
        auto t = make_tuple(tau, {std::move(user), text(i)});
        std::const_pointer_cast<Tuple>(t)->source_tau = tau;
        return t;
    }

private:
    std::uint64_t seed_;
    std::size_t words_;
    double hashtag_share_;
    std::vector<double> cdf_;
};

inline std::vector<TuplePtr> gen_text_stream(std::uint64_t seed, const Schedule& schedule, std::size_t vocab = 1000,
                                             std::size_t words_per_tuple = 10, double hashtag_share = 0.1) {
    TextGenerator gen(seed, vocab, words_per_tuple, hashtag_share);
    std::vector<TuplePtr> out;
    out.reserve(schedule.size());
    for (std::uint64_t i = 0; i < schedule.size(); ++i) {
        out.push_back(gen.tuple(i, schedule.tau(i)));
    }
    return out;
}

/// Bursty per-second rates in [0, max_rate], drawn per second from the seed.
inline Schedule bursty_schedule(std::uint64_t seed, std::int64_t seconds, std::int64_t max_rate = 8000) {
    std::vector<RatePhase> phases;
    for (std::int64_t s = 0; s < seconds; ++s) {
        auto r = static_cast<std::int64_t>(detail::draw(seed, static_cast<std::uint64_t>(s), 99) %
                                           static_cast<std::uint64_t>(max_rate + 1));
        phases.push_back({1, r});
    }
    return Schedule(std::move(phases));
}

/// Trades of `companies` companies: (id, price, running average). Prices deviate from a per
/// company average by up to +-10%. Tuple i belongs to stream i % 2 so a self-join can run.
inline std::vector<TuplePtr> gen_trades_stream(std::uint64_t seed, const Schedule& schedule,
                                               std::int64_t companies = 10) {
    std::vector<TuplePtr> out;
    out.reserve(schedule.size());
    for (std::uint64_t i = 0; i < schedule.size(); ++i) {
        auto id = static_cast<std::int64_t>(detail::draw(seed, i, 1) % static_cast<std::uint64_t>(companies));
        double average = 50.0 + 10.0 * static_cast<double>(id);
        double dev = (detail::unit(detail::draw(seed, i, 2)) - 0.5) * 0.2;
        auto t = std::make_shared<Tuple>();
        t->tau = schedule.tau(i);
        t->stream = static_cast<std::uint32_t>(i % 2);
        t->payload = {id, average * (1.0 + dev), average};
        t->source_tau = t->tau;
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace vsn
