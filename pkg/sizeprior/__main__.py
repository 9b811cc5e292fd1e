from sizeprior.cli import main

main()
