"""Frozen oracle values computed independently of the package.

DGP expectations were computed by adaptive quadrature (scipy.integrate.quad,
absolute error < 1e-10) of the default data-generating process: X ~ N(0,1),
e(x) = expit(0.5 x), E[Y | A=1, X=x] = 3 + 2x, sigma = 1. Normal quantiles
were computed with mpmath at 30 significant digits. Each value was
cross-checked against a 1e7-draw Monte Carlo run before freezing.
"""

# E[e(X)] = 1/2 by symmetry; E[X | A=1] = E[X e(X)] / E[e(X)]
E_X_GIVEN_TREATED = 0.236044422440

# E[Y | A=1] = 3 + 2 * E[X | A=1]
E_Y_GIVEN_TREATED = 3.472088844880

# E dU_ipw/dtheta1_j at the truth = -E[(1 - e(X)) (3 + 2X) x_j]
IPW_DTHETA_TRUTH = (-1.263955577560, -0.645933366340)

# E[U_aipw(psi*, theta*)^2] = E[(m(X) - psi*)^2 + sigma^2 / e(X)]
V_AIPW = 6.133148453067

# E[U_ipw(psi*, theta1*)^2] with the propensity known, and the asymptotic
# variance of the IPW estimator when the propensity is fitted by logistic MLE
V_IPW_KNOWN = 15.198336077601
V_IPW_MLE = 6.452827457746

# standard normal quantiles (two-sided critical values)
Z_95 = 1.9599639845400542
Z_6827 = 1.0000217133229992
Z_90 = 1.6448536269514727
Z_99 = 2.5758293035489008

# sandwich standard error for y = (1, 2, 3) under the mean moment: sqrt(2/9)
SE_MEAN_123 = 0.4714045207910317
