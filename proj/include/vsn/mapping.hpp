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
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace vsn {

using InstanceId = std::size_t;
using Epoch = std::uint64_t;

/// Key-to-instance mapping descriptor. Travels inside control tuples, so it is plain data.
struct KeyMapping {
    enum class Mode : std::uint8_t {
        HashMod,  ///< members[hash(k) % |members|]
        Modulo,   ///< members[k % |members|] for integer keys
        Table     ///< explicit entries, HashMod for keys not listed
    };

    Mode mode = Mode::HashMod;
    std::vector<InstanceId> members;
    std::unordered_map<std::string, InstanceId> table;

    static KeyMapping hash_mod(std::vector<InstanceId> members) {
        return KeyMapping{Mode::HashMod, normalize(std::move(members)), {}};
    }
    static KeyMapping modulo(std::vector<InstanceId> members) {
        return KeyMapping{Mode::Modulo, normalize(std::move(members)), {}};
    }
    static KeyMapping explicit_table(std::vector<InstanceId> members,
                                     std::unordered_map<std::string, InstanceId> entries) {
        return KeyMapping{Mode::Table, normalize(std::move(members)), std::move(entries)};
    }

    /// Same mode as this mapping over another member set.
    KeyMapping rebased(std::vector<InstanceId> new_members) const {
        KeyMapping m = *this;
        m.members = normalize(std::move(new_members));
        if (mode == Mode::Table) {
            std::erase_if(m.table, [&](const auto& e) {
                return !std::binary_search(m.members.begin(), m.members.end(), e.second);
            });
        }
        return m;
    }

    InstanceId operator()(const Key& k) const {
        switch (mode) {
            case Mode::HashMod: return members[k.hash() % members.size()];
            case Mode::Modulo: {
                auto n = static_cast<std::int64_t>(members.size());
                auto v = k.as_int() % n;
                return members[static_cast<std::size_t>(v < 0 ? v + n : v)];
            }
            case Mode::Table: {
                if (auto it = table.find(k.bytes()); it != table.end()) {
                    return it->second;
                }
                return members[k.hash() % members.size()];
            }
        }
        return members.front();
    }

    bool contains(InstanceId id) const { return std::binary_search(members.begin(), members.end(), id); }

    static std::vector<InstanceId> normalize(std::vector<InstanceId> m) {
        std::sort(m.begin(), m.end());
        m.erase(std::unique(m.begin(), m.end()), m.end());
        return m;
    }
};

inline std::vector<InstanceId> first_instances(std::size_t count) {
    std::vector<InstanceId> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = i;
    }
    return out;
}

/// Target of an epoch switch: new epoch id, instance set and mapping.
struct ReconfigSpec {
    Epoch epoch = 0;
    KeyMapping mapping;

    const std::vector<InstanceId>& members() const { return mapping.members; }
};

inline TuplePtr make_control_tuple(EventTime tau, std::shared_ptr<const ReconfigSpec> spec) {
    auto t = std::make_shared<Tuple>();
    t->tau = tau;
    t->kind = TupleKind::Control;
    t->control = std::move(spec);
    t->source_tau = tau;
    return t;
}

}  // namespace vsn
