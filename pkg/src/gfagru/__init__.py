"""Generative factor model with attention-GRU parameter forecasts, CVaR
portfolio construction, benchmarks and a rolling backtest harness."""

__version__ = "0.1.0"
