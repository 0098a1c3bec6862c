"""A time-invariant state space run three ways, then made selective.

The same discretized system is evaluated by stepping its recurrence and by
convolving with its unrolled kernel. Then we look at how far the cheap Taylor
input matrix drifts from the exact zero-order hold one as the step grows,
and finish with a selective scan whose step size depends on the input.
"""
import numpy as np

from spectralmamba import ndtensor as nd
from spectralmamba.ndtensor import DiffTensor
from spectralmamba.ssm import (LtiSsm, SelectiveSsmParams, conv_scan, discretize_taylor, discretize_zoh,
                               recurrent_scan, selective_scan, ssm_conv_kernel)

rng = np.random.default_rng(0)

# a 4-state stable system over a 32-step signal
system = LtiSsm(A=-rng.uniform(0.2, 2.0, 4), B=rng.normal(size=4), Cvec=rng.normal(size=4), delta=0.3)
disc = discretize_zoh(system)
x = rng.normal(size=32)

stepped = recurrent_scan(disc, x)
kernel = ssm_conv_kernel(disc, len(x))
convolved = conv_scan(x, kernel)
print(f"kernel head      {np.round(kernel[:5], 4)}")
print(f"recurrent vs conv  max |diff| = {np.max(np.abs(stepped - convolved)):.2e}")

# Taylor keeps exp(delta*A) but linearizes the input matrix; the gap grows with delta
print("\n  delta    Bbar zoh    Bbar taylor   rel gap")
for delta in (1e-4, 1e-2, 0.1, 0.5, 1.0, 2.0):
    s = LtiSsm(np.array([-1.0]), np.array([1.0]), np.array([1.0]), delta)
    z, t = discretize_zoh(s).Bbar[0], discretize_taylor(s).Bbar[0]
    print(f"  {delta:<7g}  {z:.6f}    {t:.6f}      {abs(z - t) / z:.2e}")

# selective: delta, B and C are projections of the input, so a large input
# shortens the memory of the channel it drives
params = SelectiveSsmParams.init(2, 4, rng)
seq = np.zeros((24, 2))
seq[4, 0] = 1.0                 # an impulse on channel 0
seq[12:, 1] = 3.0               # a step on channel 1 from t=12
with nd.no_grad():
    y = selective_scan(DiffTensor(seq), params).data
print("\nselective scan response (t, ch0, ch1):")
for t in (3, 4, 5, 8, 12, 16, 23):
    print(f"  {t:2d}  {y[t, 0]: .4f}  {y[t, 1]: .4f}")
