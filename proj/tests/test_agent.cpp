// Tests for the agent module.
