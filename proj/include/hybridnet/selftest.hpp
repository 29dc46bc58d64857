#pragma once

#include <ostream>

namespace hybridnet {

// Fast invariant sweep (kernel backend equivalence, quantizer contracts,
// gumbel statistics, fixed-point equality, pruning compaction, cost
// arithmetic). Prints one line per check; returns the number of failures.
int selftest(std::ostream& out);

}  // namespace hybridnet
