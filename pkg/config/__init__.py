# Runtime settings and experiment configuration
