from scopfsampler.cli import main

main()
