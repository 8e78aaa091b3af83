// Tests for the pso module.
