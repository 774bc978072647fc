"""PASS/FAIL lines collected by the acceptance suite and echoed in the terminal summary."""

LINES = []
