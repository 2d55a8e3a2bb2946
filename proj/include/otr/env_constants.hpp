#pragma once

// Dynamics constants of the two desk-scale control benchmarks, transcribed
// from the reference Gym implementations (MountainCarContinuous-v0,
// Pendulum-v1). Nothing else in the code base hard-codes these values.

namespace otr::constants {

namespace mountain_car {
inline constexpr double kMinPosition = -1.2;
inline constexpr double kMaxPosition = 0.6;
inline constexpr double kMaxSpeed = 0.07;
inline constexpr double kGoalPosition = 0.45;
inline constexpr double kGoalVelocity = 0.0;
inline constexpr double kPower = 0.0015;
inline constexpr double kGravity = 0.0025;  // multiplies cos(3 * position)
inline constexpr double kHillFrequency = 3.0;
inline constexpr double kMinAction = -1.0;
inline constexpr double kMaxAction = 1.0;
inline constexpr double kGoalReward = 100.0;
inline constexpr double kActionCost = 0.1;  // per step, times action^2
// Initial position ~ U[-0.6, -0.4), initial velocity 0.
inline constexpr double kInitLow = -0.6;
inline constexpr double kInitHigh = -0.4;
inline constexpr int kMaxSteps = 999;
}  // namespace mountain_car

namespace pendulum {
inline constexpr double kGravity = 10.0;
inline constexpr double kMass = 1.0;
inline constexpr double kLength = 1.0;
inline constexpr double kDt = 0.05;
inline constexpr double kMaxSpeed = 8.0;
inline constexpr double kMaxTorque = 2.0;
inline constexpr double kVelocityCost = 0.1;
inline constexpr double kTorqueCost = 0.001;
// Initial angle ~ U[-pi, pi), initial angular velocity ~ U[-1, 1).
inline constexpr double kInitMaxSpeed = 1.0;
inline constexpr int kMaxSteps = 200;
}  // namespace pendulum

}  // namespace otr::constants
