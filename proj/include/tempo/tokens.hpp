#pragma once

#include <vector>

namespace tempo {

// Reserved ids shared by every vocabulary.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kReservedIds = 4;

using TokenIds = std::vector<int>;

}  // namespace tempo
