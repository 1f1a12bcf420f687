from dextts.main import cli

cli(prog_name="dex")
