"""Power analysis for linear regression when regressors are matrix sampled.

A matrix sampling (split questionnaire) design administers each respondent a
form holding only a subset of the regressors, while the outcome is collected
on every form. This package computes the large-sample covariance of the
regression coefficient estimates under such designs, turns it into power and
sample-size answers for Wald tests, and provides the estimators (direct
maximum likelihood and multiple imputation) plus simulation drivers needed to
check the asymptotic answers against finite samples.
"""

__version__ = "0.1.0"
