"""Tensorial recurrent networks (tLSTM, tGRU) on tensor-valued time series."""
