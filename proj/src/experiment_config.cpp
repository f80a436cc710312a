#include "macfl/experiment_config.hpp"

namespace macfl {

std::string to_string(Algorithm a) { return a == Algorithm::hfl ? "hfl" : "macfl"; }

std::string to_string(MobilityCadence c) {
  return c == MobilityCadence::edge_round ? "edge_round" : "iteration";
}

std::string to_string(CosineForm f) {
  return f == CosineForm::standard ? "standard" : "squared_norms";
}

}  // namespace macfl
