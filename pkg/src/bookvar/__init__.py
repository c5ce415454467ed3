"""Next-day Value-at-Risk for standardized option books.

Pipeline: clean option chains, form fixed-rule books, mark them on the next
day through a valuation hierarchy, forecast the upper loss quantile with a
rolling learner, and recalibrate it with a decay-weighted conformal buffer.
"""

__version__ = "0.1.0"
