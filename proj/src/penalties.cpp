#include "pel/penalties.hpp"

#include <cmath>

#include "pel/errors.hpp"

namespace pel {

namespace {

double default_shape(PenaltyFamily family) {
  switch (family) {
    case PenaltyFamily::Scad:
      return 3.7;
    case PenaltyFamily::Mcp:
      return 3.0;
    case PenaltyFamily::L1:
      return 0.0;
  }
  return 0.0;
}

}  // namespace

void validate_penalty(const PenaltySpec& spec) {
  if (!(spec.tau >= 0.0) || !std::isfinite(spec.tau))
    throw ConfigError("penalty: tau must be finite and >= 0");
  if (spec.family == PenaltyFamily::Scad && !(spec.shape > 2.0))
    throw ConfigError("penalty: SCAD shape must be > 2");
  if (spec.family == PenaltyFamily::Mcp && !(spec.shape > 1.0))
    throw ConfigError("penalty: MCP shape must be > 1");
}

PenaltySpec make_penalty(PenaltyFamily family, double tau) {
  return make_penalty(family, tau, default_shape(family));
}

PenaltySpec make_penalty(PenaltyFamily family, double tau, double shape) {
  PenaltySpec spec{family, tau, shape};
  validate_penalty(spec);
  return spec;
}

PenaltySpec make_penalty(const std::string& family, double tau) {
  return make_penalty(penalty_family_from_name(family), tau);
}

PenaltySpec make_penalty(const std::string& family, double tau, double shape) {
  return make_penalty(penalty_family_from_name(family), tau, shape);
}

const char* penalty_family_name(PenaltyFamily family) {
  switch (family) {
    case PenaltyFamily::L1:
      return "l1";
    case PenaltyFamily::Scad:
      return "scad";
    case PenaltyFamily::Mcp:
      return "mcp";
  }
  return "?";
}

PenaltyFamily penalty_family_from_name(const std::string& name) {
  if (name == "l1") return PenaltyFamily::L1;
  if (name == "scad") return PenaltyFamily::Scad;
  if (name == "mcp") return PenaltyFamily::Mcp;
  throw ConfigError("penalty: unknown family \"" + name + "\"");
}

double penalty_eval(const PenaltySpec& spec, double t) {
  validate_penalty(spec);
  if (!(t >= 0.0)) throw ConfigError("penalty_eval: t must be >= 0");
  const double tau = spec.tau;
  if (tau == 0.0) return 0.0;
  const double a = spec.shape;
  switch (spec.family) {
    case PenaltyFamily::L1:
      return tau * t;
    case PenaltyFamily::Scad:
      if (t <= tau) return tau * t;
      if (t <= a * tau)
        return (2.0 * a * tau * t - t * t - tau * tau) / (2.0 * (a - 1.0));
      return (a + 1.0) * tau * tau / 2.0;
    case PenaltyFamily::Mcp:
      if (t <= a * tau) return tau * t - t * t / (2.0 * a);
      return a * tau * tau / 2.0;
  }
  return 0.0;
}

double penalty_deriv(const PenaltySpec& spec, double t) {
  validate_penalty(spec);
  if (!(t >= 0.0)) throw ConfigError("penalty_deriv: t must be >= 0");
  const double tau = spec.tau;
  if (tau == 0.0) return 0.0;
  const double a = spec.shape;
  switch (spec.family) {
    case PenaltyFamily::L1:
      return tau;
    case PenaltyFamily::Scad:
      if (t < tau) return tau;
      if (t < a * tau) return (a * tau - t) / (a - 1.0);
      return 0.0;
    case PenaltyFamily::Mcp:
      if (t < a * tau) return tau - t / a;
      return 0.0;
  }
  return 0.0;
}

double penalty_curvature(const PenaltySpec& spec, double t) {
  validate_penalty(spec);
  if (!(t > 0.0)) throw ConfigError("penalty_curvature: t must be > 0");
  const double tau = spec.tau;
  if (tau == 0.0) return 0.0;
  const double a = spec.shape;
  switch (spec.family) {
    case PenaltyFamily::L1:
      return 0.0;
    case PenaltyFamily::Scad:
      if (t < tau) return 0.0;
      if (t < a * tau) return -1.0 / (a - 1.0);
      return 0.0;
    case PenaltyFamily::Mcp:
      if (t < a * tau) return -1.0 / a;
      return 0.0;
  }
  return 0.0;
}

}  // namespace pel
