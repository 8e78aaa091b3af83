// Tests for the cli module.
