"""Vision-guided sampling MPC for gate racing: gate guidance fields, quadrotor
dynamics, an MPPI controller, a learned SDF and a closed-loop race harness."""

__version__ = "0.1.0"
