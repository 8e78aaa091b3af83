// Tests for the mdp module.
