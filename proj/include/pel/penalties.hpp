#pragma once

#include <string>

namespace pel {

enum class PenaltyFamily { L1, Scad, Mcp };

// Folded-concave penalty P_tau(t) on t >= 0. All three families share the
// normalized slope P'(0+)/tau = 1, so tau alone sets the soft-threshold
// level. shape is the SCAD/MCP concavity constant (unused by L1).
struct PenaltySpec {
  PenaltyFamily family = PenaltyFamily::Scad;
  double tau = 0.0;
  double shape = 3.7;
};

// Constructs a validated spec; picks the family's conventional shape when
// none is given (SCAD 3.7, MCP 3.0). Throws ConfigError on bad input.
PenaltySpec make_penalty(PenaltyFamily family, double tau);
PenaltySpec make_penalty(PenaltyFamily family, double tau, double shape);
PenaltySpec make_penalty(const std::string& family, double tau);
PenaltySpec make_penalty(const std::string& family, double tau, double shape);

void validate_penalty(const PenaltySpec& spec);

const char* penalty_family_name(PenaltyFamily family);
PenaltyFamily penalty_family_from_name(const std::string& name);

// P_tau(t) for t >= 0. Throws ConfigError on t < 0 or an invalid spec.
double penalty_eval(const PenaltySpec& spec, double t);

// Right derivative P'_tau(t); penalty_deriv(spec, 0) = tau for all families.
double penalty_deriv(const PenaltySpec& spec, double t);

// Right second derivative P''_tau(t) for t > 0 (0 for L1, negative inside
// the SCAD/MCP concave regions, 0 past the flat threshold).
double penalty_curvature(const PenaltySpec& spec, double t);

}  // namespace pel
