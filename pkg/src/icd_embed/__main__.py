from icd_embed.cli import main

main()
