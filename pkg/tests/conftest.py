import hypothesis

# Stochastic-simulation tests must not flake: hypothesis example selection is
# derandomized so failures reproduce bit-for-bit in CI and locally.
hypothesis.settings.register_profile(
    "deterministic", derandomize=True, deadline=None
)
hypothesis.settings.load_profile("deterministic")
