#pragma once

namespace macfl {

/// `serial` is the reference path kept for testing; `parallel` runs the same
/// blocked computation under OpenMP. Both produce bit-identical results.
enum class Execution { serial, parallel };

}  // namespace macfl
