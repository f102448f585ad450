# Retrodictive forecasting toolkit: core pipeline and read-only results API
