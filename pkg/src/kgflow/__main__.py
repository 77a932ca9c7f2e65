from kgflow.cli import main

main()
