/*
   Copyright 2026 The fmint-sde Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

#pragma once

#include <array>
#include <string_view>
#include <vector>

#include "fmint/sde_systems.hpp"

namespace fmint {

/// Short plain-text descriptions bundled per system, used as optional
/// prompts for multimodal training.
inline std::vector<std::string_view> prompts_for(SystemId id) {
    switch (id) {
        case SystemId::gbm:
            return {"Geometric Brownian motion dX = mu X dt + sigma X dW, a log-normal growth model for asset prices "
                    "with drift rate mu and volatility sigma.",
                    "Multiplicative noise process whose logarithm is a Brownian motion with drift; sigma scales "
                    "fluctuations proportionally to the state."};
        case SystemId::mueller:
            return {"Overdamped Langevin dynamics in the Mueller potential, a two dimensional energy landscape with "
                    "three minima used as a benchmark for rare transitions in chemical physics.",
                    "Gradient flow dX = -grad V dt + sqrt(2/beta) dW; beta is the inverse temperature and small beta "
                    "makes hopping between wells frequent."};
        case SystemId::periodic_oscillator:
            return {"Nonlinear oscillator with a time periodic modulation in the drift and multiplicative noise "
                    "acting through x1 x2 and x2 squared; Omega sets the rotation rate.",
                    "Forced limit cycle with period 2 pi / omega, noise intensity sigma and state dependent "
                    "diffusion that vanishes on the axes."};
        case SystemId::stochastic_lorenz:
            return {"Lorenz 63 convection model with additive noise eta in each coordinate; rho controls the "
                    "transition from stable equilibria to the chaotic butterfly attractor.",
                    "Three variable chaotic system dX = sigma (Y - X) dt, dY = (X (rho - Z) - Y) dt, dZ = (X Y - beta "
                    "Z) dt plus independent Wiener forcing."};
        case SystemId::ou:
            return {"Ornstein-Uhlenbeck mean reverting process dX = theta (mu - X) dt + sigma dW with relaxation "
                    "rate theta toward the long run mean mu.",
                    "Gaussian Markov process used for interest rates and velocities of Brownian particles; "
                    "additive noise of size sigma."};
        case SystemId::inhomogeneous_ou:
            return {"Time inhomogeneous Ornstein-Uhlenbeck process with periodic forcing a cos(omega t) and "
                    "linear damping theta.",
                    "Mean reverting diffusion whose target oscillates in time; additive noise sigma."};
        case SystemId::double_well:
            return {"Overdamped particle in the double well potential (x1^2 - 1)^2 + alpha x2^2 at inverse "
                    "temperature beta, switching between wells at x1 = -1 and x1 = 1.",
                    "Bistable gradient system with a harmonic transverse direction of stiffness alpha."};
        case SystemId::coupled_double_well:
            return {"Double well potential with a bilinear coupling alpha x1 x2 between the bistable coordinate "
                    "and the harmonic one.",
                    "Overdamped Langevin motion where the coupling tilts the transition path between the wells."};
        case SystemId::duffing:
            return {"Forced Duffing oscillator with damping delta, linear stiffness alpha, cubic stiffness beta "
                    "and periodic forcing gamma cos(omega t); noise enters the momentum only.",
                    "With alpha < 0 and beta > 0 the potential has two wells and the oscillator is bistable with "
                    "inertia."};
        case SystemId::perturbed_limit_cycle:
            return {"Stochastically perturbed limit cycle dx = T f(x) dt + sigma sqrt(T) F(x) dW with a unit "
                    "circle attractor and diagonal multiplicative noise.",
                    "Hopf normal form oscillator whose period T rescales both drift and noise."};
        case SystemId::predator_prey:
            return {"Prey and stage structured predator model with role reversal: juvenile predators can be "
                    "eaten by prey; geometric noise on every species.",
                    "Population dynamics of prey x, juvenile predators y1 and adults y2 with maturation rate D and "
                    "death rates v1, v2."};
        case SystemId::predator_prey_variant:
            return {"Stage structured predator prey model with an extra random term on the adult predator "
                    "reproduction rate.",
                    "Role reversal population model where reproduction of juveniles is perturbed by sigma4 x y2 "
                    "noise."};
        case SystemId::fluxgate:
            return {"Three coupled magnetic cores of a fluxgate sensor, each an overdamped bistable element driven "
                    "by exponentially correlated colored noise.",
                    "Ring of cores x_j relaxing toward tanh(c (x_j + lambda x_{j+1} + y_j)); the y_j are "
                    "Ornstein-Uhlenbeck noises with rate omega."};
    }
    return {};
}

}  // namespace fmint
