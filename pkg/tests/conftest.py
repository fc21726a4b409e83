def pytest_terminal_summary(terminalreporter):
    """Print one line per acceptance criterion recorded via ``record_property``."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", None) != "call":
                continue
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "criterion"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
